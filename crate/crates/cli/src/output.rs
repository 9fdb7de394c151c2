//! CSV and JSON writers for result tables.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    /// Written as `;`-separated values in one CSV field.
    NumList(Vec<f64>),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(v) => format_float(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::NumList(v) => v.iter().map(|x| format_float(*x)).collect::<Vec<_>>().join(";"),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(v) if v.is_finite() => json!(v),
            Cell::Num(_) | Cell::Empty => Value::Null,
            Cell::Int(v) => json!(v),
            Cell::Text(s) => json!(s),
            Cell::NumList(v) => Value::Array(v.iter().map(|x| Cell::Num(*x).json()).collect()),
        }
    }
}

/// Shortest round-trip scientific notation.
pub fn format_float(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub fingerprint: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(fingerprint: String, columns: &[&str]) -> Self {
        Self {
            fingerprint,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Fingerprint comment, header, then one record per row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# {}", self.fingerprint)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv))?;
        }
        w.flush()
    }

    pub fn to_json(&self) -> Value {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let obj: Map<String, Value> = self.columns.iter().cloned().zip(row.iter().map(Cell::json)).collect();
                Value::Object(obj)
            })
            .collect();
        json!({ "fingerprint": self.fingerprint, "columns": self.columns, "rows": Value::Array(rows) })
    }

    pub fn write_json(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json()).map_err(io::Error::other)?;
        fs::write(path, text + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        let mut t = Table::new("dharq test".into(), &["a", "b", "c"]);
        t.push(vec![Cell::Num(0.1), Cell::Text("x".into()), Cell::NumList(vec![0.5, 0.25])]);
        t.push(vec![Cell::Int(3), Cell::Empty, Cell::Num(f64::NAN)]);
        t
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        sample().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "# dharq test\na,b,c\n1e-1,x,5e-1;2.5e-1\n3,,NaN\n");
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 6.2209605742717841235e-16, 12345.678] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn json_mirror() {
        let v = sample().to_json();
        assert_eq!(v["rows"][0]["b"], "x");
        assert_eq!(v["rows"][0]["c"][1], 0.25);
        assert!(v["rows"][1]["c"].is_null());
        assert_eq!(v["columns"].as_array().unwrap().len(), 3);
    }
}
