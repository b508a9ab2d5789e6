//! CSV output with fixed 17-significant-digit floats and LF endings.

use std::io::{self, Write};

/// Formats a float with 17 significant digits (round-trips every `f64`).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct CsvWriter<W: Write> {
    inner: ::csv::Writer<W>,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(out: W, header: &[&str]) -> io::Result<Self> {
        let mut inner = ::csv::WriterBuilder::new().terminator(::csv::Terminator::Any(b'\n')).from_writer(out);
        inner.write_record(header)?;
        Ok(Self { inner })
    }

    pub fn row(&mut self, cells: &[String]) -> io::Result<()> {
        Ok(self.inner.write_record(cells)?)
    }

    pub fn float_row(&mut self, values: &[f64]) -> io::Result<()> {
        let cells: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
        self.row(&cells)
    }

    pub fn finish(self) -> io::Result<W> {
        self.inner.into_inner().map_err(|e| e.into_error())
    }
}
