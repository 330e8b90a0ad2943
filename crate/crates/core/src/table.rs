//! Raw columnar tables: the input side of ingestion and the output side of the
//! simulators. Cells are untyped until a table is ingested.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single cell or covariate value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Text(String),
    Missing,
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    /// Numeric reading of the cell; text that parses as a float counts as numeric.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            Value::Text(s) => s.trim().parse().ok(),
            Value::Missing => None,
        }
    }

    /// Label reading of the cell, as used for categorical variables and actions.
    pub fn as_label(&self) -> Option<String> {
        match self {
            Value::Num(x) => Some(format_num(*x)),
            Value::Text(s) => Some(s.clone()),
            Value::Missing => None,
        }
    }
}

/// Shortest round-tripping decimal form; integral values print without a fraction.
pub fn format_num(x: f64) -> String {
    format!("{x}")
}

/// Order labels numerically when both parse as numbers, numbers before text,
/// and lexicographically otherwise.
pub fn label_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Sort and deduplicate labels with [`label_cmp`].
pub fn sorted_levels<I: IntoIterator<Item = String>>(labels: I) -> Vec<String> {
    let mut v: Vec<String> = labels.into_iter().collect();
    v.sort_by(|a, b| label_cmp(a, b));
    v.dedup();
    v
}

/// Column-major table with a header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Vec<Value>>,
    index: HashMap<String, usize>,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build a table from named columns of equal length.
    pub fn from_columns(columns: Vec<(String, Vec<Value>)>) -> Result<Self> {
        let mut t = Table::new();
        for (name, col) in columns {
            t.push_column(name, col)?;
        }
        Ok(t)
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<Value>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Key(format!("duplicate column '{name}'")));
        }
        if !self.columns.is_empty() && values.len() != self.nrows() {
            return Err(Error::Structure(format!(
                "column '{name}' has {} rows, table has {}",
                values.len(),
                self.nrows()
            )));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    pub fn push_numeric(&mut self, name: impl Into<String>, values: &[f64]) -> Result<()> {
        self.push_column(name, values.iter().map(|&x| Value::Num(x)).collect())
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<&[Value]> {
        self.index
            .get(name)
            .map(|&i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))
    }

    /// Numeric view of a column; every cell must be a finite number.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)?
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_f64()
                    .ok_or_else(|| Error::Value(format!("column '{name}' row {i} is not numeric")))
            })
            .collect()
    }

    /// Read an RFC-4180 CSV with a header row; empty cells are missing.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != names.len() {
                return Err(Error::Structure(format!(
                    "CSV record has {} fields, header has {}",
                    rec.len(),
                    names.len()
                )));
            }
            for (col, cell) in columns.iter_mut().zip(rec.iter()) {
                col.push(if cell.is_empty() {
                    Value::Missing
                } else {
                    Value::Text(cell.to_string())
                });
            }
        }
        Table::from_columns(names.into_iter().zip(columns).collect())
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(f)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        for r in 0..self.nrows() {
            let rec: Vec<String> = self
                .columns
                .iter()
                .map(|c| match &c[r] {
                    Value::Num(x) => format_num(*x),
                    Value::Text(s) => s.clone(),
                    Value::Missing => String::new(),
                })
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Select a subset of rows, in the given order.
    pub fn take_rows(&self, rows: &[usize]) -> Table {
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&r| c[r].clone()).collect())
            .collect();
        Table {
            names: self.names.clone(),
            columns,
            index: self.index.clone(),
        }
    }
}
