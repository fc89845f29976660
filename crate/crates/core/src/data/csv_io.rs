use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Task};
use crate::error::{Error, Result};

/// Column layout of an ingestion file: `d` feature columns followed by one
/// label column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub has_header: bool,
    /// Expected feature count; inferred from the first row when `None`.
    pub n_features: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            has_header: true,
            n_features: None,
        }
    }
}

/// Reads every row into the training split, in file order.
pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema, task: Task) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(::csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            ::csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                path: path.to_owned(),
                row: 0,
                message: format!("{other:?}"),
            },
        })?;

    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_owned(),
        row,
        message,
    };

    let mut expected = schema.n_features;
    let mut samples = Vec::new();
    for (k, record) in reader.records().enumerate() {
        // 1-based file line, counting the header
        let row = k + 1 + usize::from(schema.has_header);
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() < 2 {
            return Err(parse_err(row, "need at least one feature and a label".into()));
        }
        let d = record.len() - 1;
        match expected {
            Some(e) if e != d => {
                return Err(parse_err(row, format!("expected {} feature columns, found {d}", e)))
            }
            None => expected = Some(d),
            _ => {}
        }
        let mut values = Vec::with_capacity(record.len());
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(row, format!("column {}: cannot parse {field:?}", c + 1)))?;
            values.push(v);
        }
        let label = values.pop().expect("non-empty record");
        if task == Task::Classification && label != 0.0 && label != 1.0 {
            return Err(Error::validation(format!(
                "{}: row {row}: classification label {label} is not 0 or 1",
                path.display()
            )));
        }
        samples.push(Sample::new(values, label));
    }
    Dataset::new(samples, Vec::new(), task)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn preserves_file_order() {
        let f = write("a,b,y\n3.0,1.0,1\n1.0,2.0,0\n2.0,2.5,1\n");
        let ds = load_csv(f.path(), CsvSchema::default(), Task::Classification).unwrap();
        assert_eq!(ds.n_train(), 3);
        assert_eq!(ds.d, 2);
        let firsts: Vec<f64> = ds.train.iter().map(|s| s.features[0]).collect();
        assert_eq!(firsts, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn fractional_label_is_rejected_for_classification() {
        let f = write("1.0,2.0,0.5\n");
        let schema = CsvSchema {
            has_header: false,
            n_features: None,
        };
        let err = load_csv(f.path(), schema, Task::Classification).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(load_csv(f.path(), schema, Task::Regression).is_ok());
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write("x,y\n1.0,0\nabc,1\n");
        let err = load_csv(f.path(), CsvSchema::default(), Task::Classification).unwrap_err();
        match err {
            Error::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_width_is_a_parse_error() {
        let f = write("1,2,0\n1,0\n");
        let schema = CsvSchema {
            has_header: false,
            n_features: Some(2),
        };
        let err = load_csv(f.path(), schema, Task::Classification).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
    }
}
