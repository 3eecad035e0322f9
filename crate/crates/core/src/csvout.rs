//! CSV helpers: header row, 17-significant-digit floats.

use std::io::Write;

pub(crate) fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn writer<W: Write>(sink: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(sink)
}
