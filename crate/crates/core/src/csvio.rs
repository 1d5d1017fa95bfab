//! Dataset CSV files: a header row `y,a,x1,...,xp`, one unit per row.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{validate_dataset, Dataset, RawDataset};
use crate::error::{Error, Result};

/// Reads and validates a dataset. Row numbers in errors are 1-based data rows.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names.len() < 2 || names[0] != "y" || names[1] != "a" {
        return Err(Error::Malformed(format!(
            "header must start with y,a; found {}",
            names.join(",")
        )));
    }
    for (j, name) in names[2..].iter().enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(Error::Malformed(format!(
                "column {} should be named x{}, found '{name}'",
                j + 3,
                j + 1
            )));
        }
    }
    let mut raw = RawDataset::default();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != names.len() {
            return Err(Error::RaggedRow {
                row,
                expected: names.len(),
                found: record.len(),
            });
        }
        let field = |j: usize| -> Result<f64> {
            let text = record[j].trim();
            text.parse::<f64>().map_err(|_| {
                Error::Malformed(format!("row {row}, column {}: '{text}' is not a number", names[j]))
            })
        };
        raw.y.push(field(0)?);
        raw.a.push(field(1)?);
        raw.x.push((2..names.len()).map(field).collect::<Result<_>>()?);
    }
    validate_dataset(raw).map_err(one_based_rows)
}

/// Validation reports 0-based rows; files are read by humans.
fn one_based_rows(e: Error) -> Error {
    match e {
        Error::NonBinaryTreatment { row, value } => Error::NonBinaryTreatment { row: row + 1, value },
        Error::NonFinite { row, column } => Error::NonFinite { row: row + 1, column },
        Error::RaggedRow { row, expected, found } => Error::RaggedRow {
            row: row + 1,
            expected,
            found,
        },
        other => other,
    }
}

pub fn read_dataset_path(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}

/// Writes a dataset; values use Rust's shortest round-trip formatting.
pub fn write_dataset<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["y".to_string(), "a".to_string()];
    header.extend((1..=data.p()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.y()[i].to_string(), data.a()[i].to_string()];
        rec.extend(data.x_row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_path(data: &Dataset, path: &Path) -> Result<()> {
    write_dataset(data, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_simple_file() {
        let text = "y,a,x1,x2\n1.5,1,0.1,2\n-3,0,1e-3,4\n";
        let d = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.p(), 2);
        assert_eq!(d.x_row(1), &[1e-3, 4.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(read_dataset("a,y\n1,0\n".as_bytes()), Err(Error::Malformed(_))));
        assert!(matches!(read_dataset("y,a,x2\n1,0,1\n".as_bytes()), Err(Error::Malformed(_))));
        assert!(matches!(
            read_dataset("y,a\n1,1\n2,0.5\n".as_bytes()),
            Err(Error::NonBinaryTreatment { row: 2, .. })
        ));
        assert!(matches!(
            read_dataset("y,a\n1,1\n2,1\n".as_bytes()),
            Err(Error::SingleTreatmentArm(1))
        ));
        assert!(matches!(read_dataset("y,a\n1,1\nx,0\n".as_bytes()), Err(Error::Malformed(_))));
        assert!(matches!(read_dataset("y,a\n1,1\nNaN,0\n".as_bytes()), Err(Error::NonFinite { row: 2, .. })));
        assert!(read_dataset("y,a\n1,1\n2,0,5\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            rows in prop::collection::vec((-1e6f64..1e6, prop::collection::vec(-1e3f64..1e3, 3)), 2..40)
        ) {
            let n = rows.len();
            let a: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let data = Dataset::new(
                a,
                rows.iter().map(|r| r.1.clone()).collect(),
                rows.iter().map(|r| r.0).collect(),
            ).unwrap();
            let mut buf = Vec::new();
            write_dataset(&data, &mut buf).unwrap();
            let back = read_dataset(buf.as_slice()).unwrap();
            prop_assert_eq!(back, data);
        }
    }
}
