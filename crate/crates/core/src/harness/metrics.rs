//! Metrics rows and append-only CSV output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::Result;

pub const METRICS_HEADER: &str =
    "step,split,sequence_length,accuracy,loss,median_ell_star,p90_ell_star,wall_seconds";

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: String,
    pub sequence_length: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub median_ell_star: f64,
    pub p90_ell_star: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{},{},{:.3}",
            self.step,
            self.split,
            self.sequence_length,
            self.accuracy,
            self.loss,
            self.median_ell_star,
            self.p90_ell_star,
            self.wall_seconds
        )
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_well_formed() {
        let rec = MetricsRecord {
            step: 10,
            split: "eval".into(),
            sequence_length: 16,
            accuracy: 0.9375,
            loss: 0.25,
            median_ell_star: 6.0,
            p90_ell_star: 9.0,
            wall_seconds: 1.5,
        };
        let row = rec.csv_row();
        assert_eq!(row.split(',').count(), METRICS_HEADER.split(',').count());
        assert!(row.starts_with("10,eval,16,"));
    }
}
