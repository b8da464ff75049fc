//! Training pairs and the headered comma-separated file format shared by
//! designs, responses and test sets (one point per row, response last).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Design;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Design,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: Design, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::mismatch("dataset rows", x.nrows(), y.len()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("dataset contains non-finite values".into()));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Appends one observation as the last row.
    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.d() {
            return Err(Error::mismatch("appended point", self.d(), x.len()));
        }
        let n = self.n();
        let old = std::mem::replace(&mut self.x, Design::zeros(0, 0));
        self.x = old.insert_row(n, 0.0);
        for (j, &v) in x.iter().enumerate() {
            self.x[(n, j)] = v;
        }
        let old_y = std::mem::replace(&mut self.y, DVector::zeros(0));
        self.y = old_y.push(y);
        Ok(())
    }
}

/// Affine coding of inputs to the unit cube and responses to zero mean,
/// unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coding {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl Coding {
    /// Input box from the data's own range; response moments from `y`.
    pub fn from_data(data: &Dataset) -> Self {
        let d = data.d();
        let x_lo = (0..d).map(|j| data.x.column(j).min()).collect();
        let x_hi = (0..d).map(|j| data.x.column(j).max()).collect();
        Self::with_domain(x_lo, x_hi, &data.y)
    }

    /// Fixed input box, response moments from `y` (sample sd; 1 when `y` is
    /// constant or has a single entry).
    pub fn with_domain(x_lo: Vec<f64>, x_hi: Vec<f64>, y: &DVector<f64>) -> Self {
        let n = y.len();
        let y_mean = if n == 0 { 0.0 } else { y.mean() };
        let y_sd = if n < 2 {
            1.0
        } else {
            let ss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        Self {
            x_lo,
            x_hi,
            y_mean,
            y_sd: if y_sd > 0.0 && y_sd.is_finite() { y_sd } else { 1.0 },
        }
    }

    fn width(&self, j: usize) -> f64 {
        let w = self.x_hi[j] - self.x_lo[j];
        if w > 0.0 {
            w
        } else {
            1.0
        }
    }

    pub fn code_x(&self, x: &Design) -> Result<Design> {
        if x.ncols() != self.x_lo.len() {
            return Err(Error::mismatch("coded inputs", self.x_lo.len(), x.ncols()));
        }
        Ok(Design::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.x_lo[j]) / self.width(j)
        }))
    }

    pub fn decode_x(&self, x: &Design) -> Result<Design> {
        if x.ncols() != self.x_lo.len() {
            return Err(Error::mismatch("decoded inputs", self.x_lo.len(), x.ncols()));
        }
        Ok(Design::from_fn(x.nrows(), x.ncols(), |i, j| {
            self.x_lo[j] + x[(i, j)] * self.width(j)
        }))
    }

    pub fn code_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_sd)
    }

    pub fn decode_mean(&self, m: &DVector<f64>) -> DVector<f64> {
        m.map(|v| self.y_mean + v * self.y_sd)
    }

    pub fn decode_var(&self, v: &DVector<f64>) -> DVector<f64> {
        v * (self.y_sd * self.y_sd)
    }

    pub fn decode_cov(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        c * (self.y_sd * self.y_sd)
    }

    pub fn code(&self, data: &Dataset) -> Result<Dataset> {
        Dataset::new(self.code_x(&data.x)?, self.code_y(&data.y))
    }
}

/// Parses a headered numeric table into its header and row-major values.
pub fn read_table<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: '{f}' is not a number", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(Error::Parse(format!(
                "row {} has {} fields, header has {}",
                line + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn rows_to_design(rows: &[Vec<f64>], cols: usize) -> Design {
    Design::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

/// Reads `x_1..x_d, y` rows.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (header, rows) = read_table(std::fs::File::open(path)?)?;
    if header.len() < 2 {
        return Err(Error::Parse(format!(
            "{}: need at least one input column and a response column",
            path.display()
        )));
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    let d = header.len() - 1;
    let x = rows_to_design(&rows, d);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r[d]));
    Dataset::new(x, y)
}

/// Reads a design with no response column.
pub fn read_design(path: &Path) -> Result<Design> {
    let (header, rows) = read_table(std::fs::File::open(path)?)?;
    Ok(rows_to_design(&rows, header.len()))
}

pub fn input_header(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

pub fn write_row<W: Write>(out: &mut W, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let line: Vec<String> = values.into_iter().map(fmt_f64).collect();
    writeln!(out, "{}", line.join(","))?;
    Ok(())
}

/// Shortest representation that round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_dataset<W: Write>(out: &mut W, data: &Dataset) -> Result<()> {
    let mut header = input_header(data.d());
    header.push("y".into());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..data.n() {
        write_row(out, data.x.row(i).iter().copied().chain([data.y[i]]))?;
    }
    Ok(())
}

pub fn write_design<W: Write>(out: &mut W, x: &Design) -> Result<()> {
    writeln!(out, "{}", input_header(x.ncols()).join(","))?;
    for i in 0..x.nrows() {
        write_row(out, x.row(i).iter().copied())?;
    }
    Ok(())
}
