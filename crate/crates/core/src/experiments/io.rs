//! CSV and JSON artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

/// Writes `m` with a header `{prefix}1,…,{prefix}k`. Values use the shortest
/// round-trip representation, so reading back is exact.
pub fn write_matrix_csv<W: Write>(w: W, m: &DMatrix<f64>, prefix: &str) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record((1..=m.ncols()).map(|j| format!("{prefix}{j}")))?;
    for row in m.row_iter() {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a headed numeric CSV into a matrix.
pub fn read_matrix_csv<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let mut reader = csv::Reader::from_reader(r);
    let ncols = reader.headers()?.len();
    let mut values = Vec::new();
    let mut nrows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != ncols {
            return Err(Error::Parse(format!("row {} has {} fields, expected {ncols}", i + 1, record.len())));
        }
        for field in record.iter() {
            values.push(field.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: `{field}`: {e}", i + 1)))?);
        }
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &values))
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>, prefix: &str) -> Result<()> {
    write_matrix_csv(BufWriter::new(File::create(path)?), m, prefix)
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    read_matrix_csv(BufReader::new(File::open(path)?))
}

pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
