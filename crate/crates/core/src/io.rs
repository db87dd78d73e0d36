//! File formats: item-parameter CSV, long-form response CSV and JSON.
//!
//! CSVs are written with `\n` line endings and floats with 17 significant
//! digits in positional notation, so values roundtrip exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{GrmError, Result};
use crate::model::{ItemParameters, ResponseMatrix, N_CATEGORIES};

pub const ITEM_HEADER: [&str; 6] = ["item", "a", "b1", "b2", "b3", "b4"];
pub const RESPONSE_HEADER: [&str; 3] = ["subject", "item", "response"];

/// Formats a float with 17 significant digits without an exponent.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0.0000000000000000".to_string();
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (16 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn csv_error(source_name: &str, e: csv::Error) -> GrmError {
    let location = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "unknown position".to_string());
    GrmError::Parse {
        source_name: source_name.to_string(),
        location,
        message: e.to_string(),
    }
}

fn parse_error(source_name: &str, line: u64, field: &str, message: impl Into<String>) -> GrmError {
    GrmError::Parse {
        source_name: source_name.to_string(),
        location: format!("line {line}, field '{field}'"),
        message: message.into(),
    }
}

/// Reads records after checking the header; yields `(line, record)`.
fn read_records<R: Read>(reader: R, source_name: &str, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let found = rdr.headers().map_err(|e| csv_error(source_name, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(GrmError::Parse {
            source_name: source_name.to_string(),
            location: "line 1".to_string(),
            message: format!("expected header '{}', found '{}'", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    rdr.records()
        .map(|r| {
            let rec = r.map_err(|e| csv_error(source_name, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            Ok((line, rec))
        })
        .collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, line: u64, idx: usize, header: &[&str], source_name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(idx).unwrap_or_default();
    raw.parse()
        .map_err(|e| parse_error(source_name, line, header[idx], format!("cannot parse '{raw}': {e}")))
}

pub fn write_items<W: Write>(w: W, items: &[ItemParameters]) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(ITEM_HEADER).map_err(std::io::Error::from)?;
    for it in items {
        let mut row = vec![it.item_id.to_string(), format_float(it.a)];
        row.extend(it.b.iter().map(|&b| format_float(b)));
        wtr.write_record(&row).map_err(std::io::Error::from)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses an item CSV; rows are returned in file order and validated.
pub fn read_items<R: Read>(reader: R, source_name: &str) -> Result<Vec<ItemParameters>> {
    let records = read_records(reader, source_name, &ITEM_HEADER)?;
    if records.is_empty() {
        return Err(GrmError::EmptyInput(format!("{source_name} contains no items")));
    }
    records
        .iter()
        .map(|(line, rec)| {
            let id: usize = field(rec, *line, 0, &ITEM_HEADER, source_name)?;
            let a: f64 = field(rec, *line, 1, &ITEM_HEADER, source_name)?;
            let mut b = [0.0; 4];
            for (k, slot) in b.iter_mut().enumerate() {
                *slot = field(rec, *line, k + 2, &ITEM_HEADER, source_name)?;
            }
            ItemParameters::new(id, a, b).map_err(|e| parse_error(source_name, *line, "item", e.to_string()))
        })
        .collect()
}

pub fn write_responses<W: Write>(w: W, data: &ResponseMatrix) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(RESPONSE_HEADER).map_err(std::io::Error::from)?;
    for (i, row) in data.rows().enumerate() {
        for (j, y) in row.iter().enumerate() {
            wtr.write_record([i.to_string(), j.to_string(), y.to_string()])
                .map_err(std::io::Error::from)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Parses a long-form response CSV. Every (subject, item) cell of the
/// implied dense matrix must appear exactly once.
pub fn read_responses<R: Read>(reader: R, source_name: &str) -> Result<ResponseMatrix> {
    let records = read_records(reader, source_name, &RESPONSE_HEADER)?;
    if records.is_empty() {
        return Err(GrmError::EmptyInput(format!("{source_name} contains no responses")));
    }
    let mut cells = Vec::with_capacity(records.len());
    for (line, rec) in &records {
        let i: usize = field(rec, *line, 0, &RESPONSE_HEADER, source_name)?;
        let j: usize = field(rec, *line, 1, &RESPONSE_HEADER, source_name)?;
        let y: u8 = field(rec, *line, 2, &RESPONSE_HEADER, source_name)?;
        if y as usize >= N_CATEGORIES {
            return Err(parse_error(source_name, *line, "response", format!("response {y} outside 0..=4")));
        }
        cells.push((*line, i, j, y));
    }
    let n = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    let m = cells.iter().map(|c| c.2).max().unwrap_or(0) + 1;
    let mut dense: Vec<Option<u8>> = vec![None; n * m];
    for &(line, i, j, y) in &cells {
        let slot = &mut dense[i * m + j];
        if slot.is_some() {
            return Err(parse_error(source_name, line, "subject", format!("duplicate cell (subject {i}, item {j})")));
        }
        *slot = Some(y);
    }
    let values = dense
        .iter()
        .enumerate()
        .map(|(k, v)| {
            v.ok_or_else(|| GrmError::Parse {
                source_name: source_name.to_string(),
                location: "end of file".to_string(),
                message: format!("missing response for subject {}, item {}", k / m, k % m),
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    ResponseMatrix::new(n, m, values)
}

pub fn write_items_file(path: &Path, items: &[ItemParameters]) -> Result<()> {
    write_items(BufWriter::new(File::create(path)?), items)
}

pub fn read_items_file(path: &Path) -> Result<Vec<ItemParameters>> {
    read_items(File::open(path)?, &path.display().to_string())
}

pub fn write_responses_file(path: &Path, data: &ResponseMatrix) -> Result<()> {
    write_responses(BufWriter::new(File::create(path)?), data)
}

pub fn read_responses_file(path: &Path) -> Result<ResponseMatrix> {
    read_responses(File::open(path)?, &path.display().to_string())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| GrmError::Parse {
        source_name: path.display().to_string(),
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}
