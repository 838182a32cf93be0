use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Normal quantile for a two-sided 95% interval.
const Z95: f64 = 1.959_963_984_540_054;

/// One trial: its seeds, the measured statistic, the bound it is compared
/// with (log base 2) and whether the event of interest occurred.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: u64,
    pub theta_seed: u64,
    pub omega_seed: u64,
    pub statistic: f64,
    pub bound_log2: f64,
    pub flag: bool,
}

/// What the ledger's `bound_log2` means for the aggregate frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// A theorem with explicit constants; the frequency must respect it.
    Explicit,
    /// Known only up to an unspecified constant; reported for its shape.
    Shape,
    /// The bound column holds a per-trial threshold, not a probability.
    Threshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialLedger {
    pub label: String,
    pub bound_kind: BoundKind,
    /// Probability bound (log base 2) the frequency is set against.
    pub bound_log2: Option<f64>,
    pub rows: Vec<TrialRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub label: String,
    pub file: String,
    pub trials: usize,
    pub hits: usize,
    pub frequency: f64,
    pub standard_error: f64,
    pub ci95: (f64, f64),
    pub bound_kind: BoundKind,
    pub bound_log2: Option<f64>,
    /// Frequency at most bound plus three standard errors; explicit bounds only.
    pub bound_consistent: Option<bool>,
}

/// Wilson score interval for `hits` successes in `n` trials.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let mid = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((mid - half).max(0.0), (mid + half).min(1.0))
}

impl TrialLedger {
    pub fn new(label: impl Into<String>, bound_kind: BoundKind, bound_log2: Option<f64>, rows: Vec<TrialRow>) -> Self {
        Self {
            label: label.into(),
            bound_kind,
            bound_log2,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.rows.iter().filter(|r| r.flag).count()
    }

    pub fn frequency(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.hits() as f64 / self.rows.len() as f64
        }
    }

    /// Binomial standard error at the empirical frequency.
    pub fn standard_error(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let p = self.frequency();
        (p * (1.0 - p) / self.rows.len() as f64).sqrt()
    }

    pub fn ci95(&self) -> (f64, f64) {
        wilson_interval(self.hits(), self.rows.len(), Z95)
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound_log2.map(f64::exp2)
    }

    pub fn bound_consistent(&self) -> Option<bool> {
        match (self.bound_kind, self.bound()) {
            (BoundKind::Explicit, Some(b)) => Some(self.frequency() <= b + 3.0 * self.standard_error()),
            _ => None,
        }
    }

    pub fn summary(&self, file: &str) -> LedgerSummary {
        LedgerSummary {
            label: self.label.clone(),
            file: file.into(),
            trials: self.len(),
            hits: self.hits(),
            frequency: self.frequency(),
            standard_error: self.standard_error(),
            ci95: self.ci95(),
            bound_kind: self.bound_kind,
            bound_log2: self.bound_log2,
            bound_consistent: self.bound_consistent(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
