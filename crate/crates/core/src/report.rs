//! Output helpers: CSV with ',' separators, LF line endings and a header on
//! line 1; floats use Rust's shortest round-trip formatting.

use std::io::Write;

pub fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .delimiter(b',')
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// Pretty JSON followed by a trailing newline.
pub fn write_json<W: Write, T: serde::Serialize>(mut out: W, value: &T) -> crate::Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}
