//! CSV layouts: `id,p0..p{C-1}`, `id,label`, `id,f0..f{D-1}`, and plain id lists.
//!
//! Floats are written in the shortest form that parses back to the same bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;

use super::{check_row, within, Keyed, ProbabilityMatrix, RENORMALIZE_TOLERANCE, ROW_SUM_TOLERANCE};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn check_header(path: &Path, header: &csv::StringRecord, prefix: &str, width: Option<usize>) -> Result<usize> {
    let mut fields = header.iter();
    if fields.next() != Some("id") {
        return Err(Error::parse(path, "first column must be `id`"));
    }
    let mut n = 0;
    for (j, name) in fields.enumerate() {
        if name != format!("{prefix}{j}") {
            return Err(Error::parse(path, format!("column {} should be `{prefix}{j}`, found `{name}`", j + 1)));
        }
        n += 1;
    }
    if let Some(w) = width {
        if n != w {
            return Err(Error::Dimension(format!(
                "{} has {n} value columns, expected {w}",
                path.display()
            )));
        }
    }
    Ok(n)
}

fn read_numeric(path: &Path, prefix: &str, width: Option<usize>) -> Result<(Vec<String>, Matrix)> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| Error::parse(path, e))?.clone();
    let cols = check_header(path, &header, prefix, width)?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        if record.len() != cols + 1 {
            return Err(Error::Dimension(format!(
                "{} row {line} has {} fields, expected {}",
                path.display(),
                record.len(),
                cols + 1
            )));
        }
        ids.push(record[0].to_string());
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, format!("row {line}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{} row {line}", path.display())));
            }
            data.push(v);
        }
    }
    let rows = ids.len();
    Ok((ids, Matrix::from_vec(rows, cols, data)?))
}

/// Reads a probability CSV with `expected_classes` columns.
///
/// Rows summing to 1 within 1e-6 are kept verbatim. Rows off by up to 1e-4
/// are renormalized with a warning; anything further is rejected.
pub fn load_probability_matrix(path: impl AsRef<Path>, expected_classes: usize) -> Result<Keyed<ProbabilityMatrix>> {
    let path = path.as_ref();
    let (ids, mut matrix) = read_numeric(path, "p", Some(expected_classes))?;
    for (i, id) in ids.iter().enumerate() {
        let row = matrix.row_mut(i);
        let sum = check_row(i, row, RENORMALIZE_TOLERANCE)?;
        if !within((sum - 1.0).abs(), ROW_SUM_TOLERANCE) {
            warn!("{}: row {i} ({id}) sums to {sum}; renormalizing", path.display());
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(Keyed {
        ids,
        values: ProbabilityMatrix::new(matrix)?,
    })
}

pub fn save_probability_matrix(path: impl AsRef<Path>, ids: &[String], probs: &ProbabilityMatrix) -> Result<()> {
    save_numeric(path.as_ref(), "p", ids, probs.as_matrix())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Keyed<Matrix>> {
    let (ids, values) = read_numeric(path.as_ref(), "f", None)?;
    Ok(Keyed { ids, values })
}

pub fn save_features(path: impl AsRef<Path>, ids: &[String], features: &Matrix) -> Result<()> {
    save_numeric(path.as_ref(), "f", ids, features)
}

fn save_numeric(path: &Path, prefix: &str, ids: &[String], m: &Matrix) -> Result<()> {
    if ids.len() != m.rows() {
        return Err(Error::LengthMismatch {
            expected: m.rows(),
            actual: ids.len(),
        });
    }
    let mut w = writer(path)?;
    let io = |e: csv::Error| Error::parse(path, e);
    let mut header = vec!["id".to_string()];
    header.extend((0..m.cols()).map(|j| format!("{prefix}{j}")));
    w.write_record(&header).map_err(io)?;
    let mut record = Vec::with_capacity(m.cols() + 1);
    for (id, row) in ids.iter().zip(m.iter_rows()) {
        record.clear();
        record.push(id.clone());
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `id,label`; labels must be below `n_classes`.
pub fn load_labels(path: impl AsRef<Path>, n_classes: usize) -> Result<Keyed<Vec<usize>>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| Error::parse(path, e))?;
    if header.iter().collect::<Vec<_>>() != ["id", "label"] {
        return Err(Error::parse(path, "header must be `id,label`"));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        let label: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, format!("row {line}: bad label `{}`", &record[1])))?;
        if label >= n_classes {
            return Err(Error::ClassOutOfRange { index: label, n_classes });
        }
        ids.push(record[0].to_string());
        values.push(label);
    }
    Ok(Keyed { ids, values })
}

/// Reads the `id,predicted_label` columns of a prediction CSV; extra columns are ignored.
pub fn load_predictions(path: impl AsRef<Path>, n_classes: usize) -> Result<Keyed<Vec<usize>>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| Error::parse(path, e))?;
    if header.get(0) != Some("id") || header.get(1) != Some("predicted_label") {
        return Err(Error::parse(path, "header must start with `id,predicted_label`"));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        let label: usize = record
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(path, format!("row {line}: bad predicted label")))?;
        if label >= n_classes {
            return Err(Error::ClassOutOfRange { index: label, n_classes });
        }
        ids.push(record[0].to_string());
        values.push(label);
    }
    Ok(Keyed { ids, values })
}

pub fn save_labels(path: impl AsRef<Path>, ids: &[String], labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    let io = |e: csv::Error| Error::parse(path, e);
    w.write_record(["id", "label"]).map_err(io)?;
    for (id, label) in ids.iter().zip(labels) {
        w.write_record([id.as_str(), &label.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One id per line.
pub fn save_id_list(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for id in ids {
        writeln!(w, "{id}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_id_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            ids.push(line.trim().to_string());
        }
    }
    Ok(ids)
}
