//! Numeric column tables read from and written to CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}, column `{column}`: cannot parse `{value}` as a number")]
    NotNumeric { line: u64, column: String, value: String },
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("column `{name}` has {got} rows, expected {expected}")]
    RaggedColumn { name: String, expected: usize, got: usize },
}

/// Column-oriented table of `f64` values, header order preserved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataTable {
    names: Vec<String>,
    columns: BTreeMap<String, Vec<f64>>,
    n_rows: usize,
}

impl DataTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<(), DataError> {
        let name = name.into();
        if self.columns.contains_key(&name) {
            return Err(DataError::DuplicateColumn(name));
        }
        if !self.names.is_empty() && values.len() != self.n_rows {
            return Err(DataError::RaggedColumn { name, expected: self.n_rows, got: values.len() });
        }
        self.n_rows = values.len();
        self.names.push(name.clone());
        self.columns.insert(name, values);
        Ok(())
    }

    /// Builder-style variant of [`push_column`](Self::push_column).
    pub fn with_column(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self, DataError> {
        self.push_column(name, values)?;
        Ok(self)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            for (k, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| DataError::NotNumeric {
                    line,
                    column: headers[k].clone(),
                    value: field.to_owned(),
                })?;
                cols[k].push(v);
            }
        }
        let mut table = DataTable::new();
        if headers.is_empty() {
            return Ok(table);
        }
        for (name, col) in headers.into_iter().zip(cols) {
            table.push_column(name, col)?;
        }
        Ok(table)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.names)?;
        for r in 0..self.n_rows {
            wtr.write_record(self.names.iter().map(|n| format_number(self.columns[n][r])))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.to_writer(std::fs::File::create(path)?)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let t = DataTable::new()
            .with_column("y", vec![1.0, 0.0, 3.0])
            .unwrap()
            .with_column("x", vec![0.1, -2.5e-7, 1.0 / 3.0])
            .unwrap();
        let mut buf = Vec::new();
        t.to_writer(&mut buf).unwrap();
        let back = DataTable::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.names(), &["y".to_string(), "x".to_string()]);
    }

    #[test]
    fn non_numeric_field_reports_line() {
        let err = DataTable::from_reader("a,b\n1,2\n3,x\n".as_bytes()).unwrap_err();
        match err {
            DataError::NotNumeric { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ragged_columns_rejected() {
        let err = DataTable::new().with_column("a", vec![1.0]).unwrap().with_column("b", vec![]).unwrap_err();
        assert!(matches!(err, DataError::RaggedColumn { .. }));
    }
}
