use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

/// One logging interval. Loss columns hold weighted contributions, so the
/// present ones add up to `total`; columns a phase does not use stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub iteration: usize,
    pub total: Option<f64>,
    pub vel_rex: Option<f64>,
    pub vel_img: Option<f64>,
    pub kd: Option<f64>,
    pub traj: Option<f64>,
    pub rec: Option<f64>,
    pub flex: Option<f64>,
    pub flex_active: Option<bool>,
    pub feature_mse: Option<f64>,
    pub frechet: Option<f64>,
    pub steps: Option<usize>,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn new(phase: &str, iteration: usize) -> Self {
        Self { phase: phase.to_string(), iteration, ..Self::default() }
    }

    /// Sum of the loss columns present in the record.
    pub fn component_sum(&self) -> f64 {
        [self.vel_rex, self.vel_img, self.kd, self.traj, self.rec, self.flex].iter().flatten().sum()
    }
}

pub fn write_records<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TableFormat {
    #[default]
    Csv,
    Json,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Json => "json",
        }
    }
}

/// Writes `rows` to `dir/stem.{csv,json}` and returns the path.
pub fn write_table<R: Serialize>(dir: impl AsRef<Path>, stem: &str, rows: &[R], fmt: TableFormat) -> Result<PathBuf> {
    let path = dir.as_ref().join(format!("{stem}.{}", fmt.extension()));
    match fmt {
        TableFormat::Csv => write_records(&path, rows)?,
        TableFormat::Json => {
            let mut s = serde_json::to_string_pretty(rows)?;
            s.push('\n');
            std::fs::write(&path, s)?;
        }
    }
    Ok(path)
}

pub fn records_to_string<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| crate::error::Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut r = MetricsRecord::new("phase1", 3);
        r.total = Some(1.5);
        r.vel_rex = Some(1.0);
        r.kd = Some(0.5);
        assert_eq!(r.component_sum(), 1.5);
        let s = records_to_string(&[r]).unwrap();
        let mut lines = s.lines();
        assert_eq!(
            lines.next().unwrap(),
            "phase,iteration,total,vel_rex,vel_img,kd,traj,rec,flex,flex_active,feature_mse,frechet,steps,wall_ms"
        );
        assert_eq!(lines.next().unwrap(), "phase1,3,1.5,1.0,,0.5,,,,,,,,0");
    }
}
