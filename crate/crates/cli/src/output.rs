//! JSON and CSV emission. Floats use the shortest round-trip representation, so files are
//! byte-stable for identical inputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::Value;

use crate::CliError;

pub fn mat(m: &DMatrix<f64>) -> Value {
    Value::from((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

pub fn vec(v: &DVector<f64>) -> Value {
    Value::from(v.iter().copied().collect::<Vec<_>>())
}

pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    w.write_record(header).map_err(std::io::Error::from)?;
    for row in rows {
        w.write_record(row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn strings<const N: usize>(xs: [&str; N]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rows() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 0.1]);
        assert_eq!(mat(&m).to_string(), "[[1.0,2.0],[3.0,0.1]]");
        assert_eq!(opt(None), "");
        assert_eq!(opt(Some(0.5)), "0.5");
    }
}
