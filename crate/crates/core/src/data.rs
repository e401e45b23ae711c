//! Observed-data structures, CSV ingestion, and dataset validation.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::Side;

/// One subject's observation.
///
/// `v` is the observed value `min(x, c)` of the censorable covariate,
/// `delta` is true when the covariate value itself was observed, `z` holds
/// the fully observed model covariates, `y` is the outcome, and `h_extra`
/// holds auxiliary covariates that enter only the selection models. The
/// selection-model covariate vector is the concatenation `(z, h_extra)`,
/// with `z` always the prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedRecord {
    pub v: f64,
    pub delta: bool,
    pub z: Vec<f64>,
    pub y: f64,
    pub h_extra: Vec<f64>,
}

impl ObservedRecord {
    /// Complement indicator: true when the covariate value is censored.
    /// Derived on the fly, never stored.
    pub fn delta_star(&self) -> bool {
        !self.delta
    }

    /// Selection-model covariates `(z, h_extra)`.
    pub fn h(&self) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.z.len() + self.h_extra.len());
        h.extend_from_slice(&self.z);
        h.extend_from_slice(&self.h_extra);
        h
    }

    fn validate(&self) -> Result<()> {
        if !self.v.is_finite() || self.v < 0.0 {
            return Err(Error::InvalidData(format!(
                "v must be finite and nonnegative, got {}",
                self.v
            )));
        }
        if !self.y.is_finite() {
            return Err(Error::InvalidData(format!(
                "y must be finite, got {}",
                self.y
            )));
        }
        if self
            .z
            .iter()
            .chain(self.h_extra.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidData("covariates must be finite".into()));
        }
        Ok(())
    }
}

/// An immutable collection of records with a common covariate layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<ObservedRecord>,
    p: usize,
    q: usize,
}

impl Dataset {
    pub fn new(records: Vec<ObservedRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p = records[0].z.len();
        let q = records[0].h_extra.len();
        for (i, r) in records.iter().enumerate() {
            if r.z.len() != p || r.h_extra.len() != q {
                return Err(Error::InvalidData(format!(
                    "record {} has covariate dimensions ({}, {}), expected ({}, {})",
                    i,
                    r.z.len(),
                    r.h_extra.len(),
                    p,
                    q
                )));
            }
            r.validate()
                .map_err(|e| Error::InvalidData(format!("record {}: {}", i, e)))?;
        }
        Ok(Dataset { records, p, q })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Dimension of `z`.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Dimension of `h_extra`.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn records(&self) -> &[ObservedRecord] {
        &self.records
    }

    pub fn n_complete(&self) -> usize {
        self.records.iter().filter(|r| r.delta).count()
    }

    pub fn censoring_fraction(&self) -> f64 {
        (self.n() - self.n_complete()) as f64 / self.n() as f64
    }

    /// The regression design `(1, x, z)` needs `p + 2` columns, so any fit
    /// requires at least that many records.
    pub fn require_fit_size(&self) -> Result<()> {
        if self.n() < self.p + 2 {
            return Err(Error::InvalidData(format!(
                "need at least {} records to fit {} coefficients, got {}",
                self.p + 2,
                self.p + 2,
                self.n()
            )));
        }
        Ok(())
    }
}

/// Column-role mapping for CSV input. Loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub v: String,
    pub delta: String,
    pub y: String,
    #[serde(default)]
    pub z: Vec<String>,
    #[serde(default)]
    pub h_extra: Vec<String>,
}

impl ColumnSchema {
    /// The header layout produced by [`write_csv`].
    pub fn canonical(p: usize, q: usize) -> Self {
        ColumnSchema {
            v: "v".into(),
            delta: "delta".into(),
            y: "y".into(),
            z: (1..=p).map(|j| format!("z{}", j)).collect(),
            h_extra: (1..=q).map(|j| format!("h{}", j)).collect(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {}", path.display(), e)))
    }
}

fn parse_cell(cell: &str, row: usize, col: &str) -> Result<f64> {
    let trimmed = cell.trim();
    if trimmed.is_empty() {
        return Err(Error::ParseRow {
            row,
            msg: format!("empty cell in column '{}'", col),
        });
    }
    trimmed.parse::<f64>().map_err(|_| Error::ParseRow {
        row,
        msg: format!("non-numeric value '{}' in column '{}'", trimmed, col),
    })
}

/// Load a dataset from CSV with a header row. Row order is preserved and no
/// imputation is performed; empty cells are rejected.
pub fn load_csv(path: &Path, schema: &ColumnSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{}' not found in header", name)))
    };
    let v_idx = find(&schema.v)?;
    let delta_idx = find(&schema.delta)?;
    let y_idx = find(&schema.y)?;
    let z_idx: Vec<usize> = schema.z.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let h_idx: Vec<usize> = schema
        .h_extra
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let rownum = i + 1;
        let get = |idx: usize, col: &str| -> Result<f64> {
            let cell = row.get(idx).ok_or_else(|| Error::ParseRow {
                row: rownum,
                msg: format!("missing cell for column '{}'", col),
            })?;
            parse_cell(cell, rownum, col)
        };

        let v = get(v_idx, &schema.v)?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::ParseRow {
                row: rownum,
                msg: format!("v must be finite and nonnegative, got {}", v),
            });
        }
        let delta_raw = get(delta_idx, &schema.delta)?;
        let delta = if delta_raw == 0.0 {
            false
        } else if delta_raw == 1.0 {
            true
        } else {
            return Err(Error::ParseRow {
                row: rownum,
                msg: format!("delta must be 0 or 1, got {}", delta_raw),
            });
        };
        let y = get(y_idx, &schema.y)?;
        if !y.is_finite() {
            return Err(Error::ParseRow {
                row: rownum,
                msg: format!("y must be finite, got {}", y),
            });
        }
        let mut z = Vec::with_capacity(z_idx.len());
        for (idx, name) in z_idx.iter().zip(&schema.z) {
            let x = get(*idx, name)?;
            if !x.is_finite() {
                return Err(Error::ParseRow {
                    row: rownum,
                    msg: format!("non-finite value in column '{}'", name),
                });
            }
            z.push(x);
        }
        let mut h_extra = Vec::with_capacity(h_idx.len());
        for (idx, name) in h_idx.iter().zip(&schema.h_extra) {
            let x = get(*idx, name)?;
            if !x.is_finite() {
                return Err(Error::ParseRow {
                    row: rownum,
                    msg: format!("non-finite value in column '{}'", name),
                });
            }
            h_extra.push(x);
        }
        records.push(ObservedRecord {
            v,
            delta,
            z,
            y,
            h_extra,
        });
    }
    Dataset::new(records)
}

/// Write a dataset with the canonical header `v,delta,y,z1..,h1..`.
/// Values round-trip exactly through [`load_csv`].
pub fn write_csv(d: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_writer(d, file)
}

pub fn write_csv_writer<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let schema = ColumnSchema::canonical(d.p(), d.q());
    let mut header = vec![schema.v.clone(), schema.delta.clone(), schema.y.clone()];
    header.extend(schema.z.iter().cloned());
    header.extend(schema.h_extra.iter().cloned());
    wtr.write_record(&header)?;
    for r in d.records() {
        let mut row = vec![
            format_f64(r.v),
            if r.delta {
                "1".to_string()
            } else {
                "0".to_string()
            },
            format_f64(r.y),
        ];
        row.extend(r.z.iter().map(|x| format_f64(*x)));
        row.extend(r.h_extra.iter().map(|x| format_f64(*x)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

// Shortest representation that parses back to the same f64.
fn format_f64(x: f64) -> String {
    let mut s = format!("{}", x);
    if s.parse::<f64>() != Ok(x) {
        s = format!("{:e}", x);
    }
    s
}

/// Summary statistics and degeneracy flags for a dataset, prior to fitting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub n_complete: usize,
    pub n_censored: usize,
    pub censoring_fraction: f64,
    /// Columns of the complete-case design `(1, x, z)`.
    pub design_columns: usize,
    /// Numerical rank of that design.
    pub design_rank: usize,
    pub rank_deficient: bool,
    /// All fits are impossible when set.
    pub no_complete_cases: bool,
}

/// Report dataset shape, censoring, and the rank of the complete-case design.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let n = d.n();
    let n_complete = d.n_complete();
    let k = d.p() + 2;
    let (rank, deficient) = if n_complete == 0 {
        (0, true)
    } else {
        let mut m = DMatrix::zeros(n_complete, k);
        for (i, r) in d.records().iter().filter(|r| r.delta).enumerate() {
            m[(i, 0)] = 1.0;
            m[(i, 1)] = r.v;
            for (j, zj) in r.z.iter().enumerate() {
                m[(i, j + 2)] = *zj;
            }
        }
        let svd = m.svd(false, false);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let tol = smax * f64::EPSILON * (n_complete.max(k) as f64);
        let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
        (rank, rank < k.min(n_complete))
    };
    ValidationReport {
        n,
        n_complete,
        n_censored: n - n_complete,
        censoring_fraction: d.censoring_fraction(),
        design_columns: k,
        design_rank: rank,
        rank_deficient: deficient,
        no_complete_cases: n_complete == 0,
    }
}

/// Identifies which selection model produced a weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    Cc,
    IpcwLogistic,
    IpcwKm,
    IpcwCox,
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            WeightScheme::Cc => "CC",
            WeightScheme::IpcwLogistic => "IPCW",
            WeightScheme::IpcwKm => "IPCW KM",
            WeightScheme::IpcwCox => "IPCW Cox",
        };
        f.write_str(s)
    }
}

/// Per-subject selection probabilities and fitting weights.
///
/// Censored records always carry weight zero. For the IPCW schemes the
/// unstabilized weight of a complete case is exactly `1 / pi` after the
/// probability floor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector {
    pub pi: Vec<f64>,
    pub w: Vec<f64>,
    pub scheme: WeightScheme,
    pub stabilized: bool,
    /// Sidedness used when evaluating survival-based probabilities.
    pub side: Side,
    /// Number of probabilities raised to the floor.
    pub n_floored: usize,
    /// A survival factor went nonpositive somewhere (see cox survival flooring).
    pub degenerate: bool,
    /// Percentile truncation was applied to the weights.
    pub truncated: bool,
}

impl WeightVector {
    /// Unit weights on every record; used when a scheme short-circuits on
    /// censoring-free data.
    pub fn unit(n: usize, scheme: WeightScheme, side: Side, stabilized: bool) -> Self {
        WeightVector {
            pi: vec![1.0; n],
            w: vec![1.0; n],
            scheme,
            stabilized,
            side,
            n_floored: 0,
            degenerate: false,
            truncated: false,
        }
    }

    /// Check the structural invariants against the dataset that produced this
    /// vector. Intended for tests and debugging.
    pub fn check_against(&self, d: &Dataset) -> Result<()> {
        if self.pi.len() != d.n() || self.w.len() != d.n() {
            return Err(Error::InvalidData("weight length mismatch".into()));
        }
        for (i, r) in d.records().iter().enumerate() {
            if r.delta {
                if self.w[i] <= 0.0 {
                    return Err(Error::InvalidData(format!(
                        "complete case {} has nonpositive weight {}",
                        i, self.w[i]
                    )));
                }
                if !(self.pi[i] > 0.0 && self.pi[i] <= 1.0) {
                    return Err(Error::InvalidData(format!(
                        "record {} has selection probability {} outside (0, 1]",
                        i, self.pi[i]
                    )));
                }
                if self.scheme != WeightScheme::Cc
                    && !self.stabilized
                    && !self.truncated
                    && self.w[i] != 1.0 / self.pi[i]
                {
                    return Err(Error::InvalidData(format!(
                        "record {}: weight {} is not 1/pi = {}",
                        i,
                        self.w[i],
                        1.0 / self.pi[i]
                    )));
                }
            } else if self.w[i] != 0.0 {
                return Err(Error::InvalidData(format!(
                    "censored record {} has nonzero weight {}",
                    i, self.w[i]
                )));
            }
        }
        Ok(())
    }
}
