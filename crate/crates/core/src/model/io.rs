//! CSV form of a dataset: header `subject,time,y,x1,…,xp`, one row per observation,
//! rows sorted by (subject, time), exactly `m` rows per subject.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::dataset::{Individual, LongitudinalDataset};
use crate::error::{GeeError, Result};

fn data_err(line: u64, message: impl Into<String>) -> GeeError {
    GeeError::Data { line, message: message.into() }
}

fn csv_err(e: csv::Error) -> GeeError {
    let line = e.position().map_or(0, |p| p.line());
    data_err(line, e.to_string())
}

struct Block {
    id: i64,
    first_line: u64,
    times: Vec<f64>,
    y: Vec<f64>,
    x: Vec<f64>,
}

impl Block {
    fn finish(self, m: usize, p: usize) -> Result<Individual> {
        if self.times.len() != m {
            return Err(data_err(
                self.first_line,
                format!("subject {} has {} rows, expected {m}", self.id, self.times.len()),
            ));
        }
        Ok(Individual {
            id: self.id,
            times: self.times,
            x: DMatrix::from_row_slice(m, p, &self.x),
            y: DVector::from_vec(self.y),
        })
    }
}

pub fn read_dataset<R: Read>(reader: R) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 4 || names[..3] != ["subject", "time", "y"] {
        return Err(data_err(1, "header must start with subject,time,y followed by x1..xp"));
    }
    let p = names.len() - 3;
    for (k, name) in names[3..].iter().enumerate() {
        if *name != format!("x{}", k + 1) {
            return Err(data_err(1, format!("column {} should be x{}, found '{name}'", k + 4, k + 1)));
        }
    }

    let mut m: Option<usize> = None;
    let mut individuals = Vec::new();
    let mut current: Option<Block> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |pos| pos.line());
        let field = |k: usize| -> Result<f64> {
            let s = &rec[k];
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| data_err(line, format!("column '{}' is not a finite number: '{s}'", names[k])))
        };
        let id: i64 = rec[0].parse().map_err(|_| data_err(line, format!("subject '{}' is not an integer", &rec[0])))?;
        let time = field(1)?;
        let y = field(2)?;

        let same = current.as_ref().is_some_and(|b| b.id == id);
        if !same {
            if let Some(done) = current.take() {
                if id <= done.id {
                    return Err(data_err(line, format!("subject {id} out of order after {}", done.id)));
                }
                let mm = *m.get_or_insert(done.times.len());
                individuals.push(done.finish(mm, p)?);
            }
            current = Some(Block { id, first_line: line, times: vec![], y: vec![], x: vec![] });
        }
        let block = current.as_mut().expect("block initialised above");
        if let Some(&last) = block.times.last() {
            if time <= last {
                return Err(data_err(line, format!("time {time} not increasing within subject {id}")));
            }
        }
        if let Some(mm) = m {
            if block.times.len() == mm {
                return Err(data_err(line, format!("subject {id} has more than {mm} rows")));
            }
        }
        block.times.push(time);
        block.y.push(y);
        for k in 0..p {
            block.x.push(field(3 + k)?);
        }
    }
    let last = current.ok_or_else(|| data_err(2, "dataset has no rows"))?;
    let mm = m.unwrap_or(last.times.len());
    individuals.push(last.finish(mm, p)?);
    LongitudinalDataset::new(individuals)
}

pub fn read_dataset_file(path: &Path) -> Result<LongitudinalDataset> {
    read_dataset(std::fs::File::open(path)?)
}

/// Writes the dataset; floats use shortest round-trip formatting.
pub fn write_dataset<W: Write>(ds: &LongitudinalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject".to_string(), "time".into(), "y".into()];
    header.extend((1..=ds.p()).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for ind in ds.individuals() {
        for j in 0..ds.m() {
            let mut row = vec![ind.id.to_string(), ind.times[j].to_string(), ind.y[j].to_string()];
            row.extend((0..ds.p()).map(|k| ind.x[(j, k)].to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a headerless square matrix (e.g. a custom correlation).
pub fn read_matrix<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| data_err(line, format!("'{s}' is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let r = rows.len();
    if r == 0 || rows.iter().any(|row| row.len() != r) {
        return Err(data_err(1, "matrix must be square and non-empty"));
    }
    Ok(DMatrix::from_fn(r, r, |i, j| rows[i][j]))
}
