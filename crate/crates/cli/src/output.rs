//! CSV artifacts. Every file starts with a `# config_hash=<hex>` comment line
//! followed by the header row. Floats are written in shortest round-trip form,
//! so parsing a file back yields the exact values; absent values are empty.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::CliError;

const HASH_PREFIX: &str = "# config_hash=";

pub struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
    columns: usize,
}

impl CsvOut {
    pub fn create(path: &Path, config_hash: &str, header: &[&str]) -> Result<Self, CliError> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "{HASH_PREFIX}{config_hash}")?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            columns: header.len(),
        })
    }

    pub fn row(&mut self, cells: &[Cell]) -> Result<(), CliError> {
        debug_assert_eq!(cells.len(), self.columns, "{}", self.path.display());
        self.writer.write_record(cells.iter().map(Cell::render))?;
        Ok(())
    }

    /// Push buffered rows to disk, for traces that are followed live.
    pub fn flush(&mut self) -> Result<(), CliError> {
        self.writer.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.writer.flush()?;
        Ok(self.path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Missing,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Float)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// A CSV artifact read back into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub config_hash: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let config_hash = first
            .trim_end()
            .strip_prefix(HASH_PREFIX)
            .ok_or_else(|| CliError::Config(format!("{} lacks the config hash line", path.display())))?
            .to_string();
        let mut csv = csv::Reader::from_reader(reader);
        let header = csv.headers()?.iter().map(str::to_string).collect();
        let rows = csv
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config_hash,
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Parse every cell of a column; empty cells become `None`.
    pub fn floats(&self, name: &str) -> Result<Vec<Option<f64>>, CliError> {
        let c = self
            .column(name)
            .ok_or_else(|| CliError::Config(format!("no column '{name}'")))?;
        self.rows
            .iter()
            .map(|r| match r[c].as_str() {
                "" => Ok(None),
                s => s
                    .parse()
                    .map(Some)
                    .map_err(|_| CliError::Config(format!("column '{name}': '{s}' is not a number"))),
            })
            .collect()
    }
}
