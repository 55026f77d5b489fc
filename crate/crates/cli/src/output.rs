//! CSV files with a leading `#schema` line, and 8-bit portable graymaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::CliError;

pub fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "#schema {schema}").map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(out))
}

pub fn csv_reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

/// Binary PGM, scaled so the largest value maps to 255. Negative values clip to 0.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), CliError> {
    assert_eq!(values.len(), width * height, "image size mismatch");
    let top = values.iter().cloned().fold(0.0, f64::max);
    let scale = if top > 0.0 { 255.0 / top } else { 0.0 };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.max(0.0) * scale).round().min(255.0) as u8));
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 3, 2, &[0.0, 1.0, 2.0, -1.0, 4.0, 3.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 64, 128, 0, 255, 191]);
    }
}
