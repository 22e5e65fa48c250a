//! CSV ingestion, atomic file output and JSON matrix encoding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Read a numeric CSV into a dense matrix. Row and column numbers in errors
/// are 1-based and count the header line when present.
pub fn read_matrix_csv(path: &Path, header: bool) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, header, &path.display().to_string())
}

/// Read a vector stored either as one column or as one row.
pub fn read_vector_csv(path: &Path, header: bool) -> Result<Vector> {
    let m = read_matrix_csv(path, header)?;
    vector_from_matrix(m, &path.display().to_string())
}

fn vector_from_matrix(m: Matrix, source_name: &str) -> Result<Vector> {
    match m.shape() {
        (_, 1) => Ok(m.column(0).into_owned()),
        (1, _) => Ok(m.row(0).transpose()),
        (r, c) => Err(Error::InvalidInput(format!(
            "{source_name}: expected a single row or column, found {r}x{c}"
        ))),
    }
}

pub fn parse_matrix_csv(text: &str, header: bool, source_name: &str) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let parse_err = |row: usize, col: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        row,
        col,
        message,
    };
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            parse_err(row, 0, e.to_string())
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(parse_err(
                    line,
                    record.len().min(c) + 1,
                    format!("expected {c} fields, found {}", record.len()),
                ))
            }
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, j + 1, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, j + 1, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_err(1, 1, "no data rows".into()))?;
    Ok(Matrix::from_row_slice(rows, cols, &data))
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// `{"shape": [rows, cols], "data": [[...], ...]}`.
pub mod matrix_json {
    use serde::ser::SerializeStruct;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::linalg::Matrix;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        let mut st = s.serialize_struct("Matrix", 2)?;
        st.serialize_field("shape", &[m.nrows(), m.ncols()])?;
        st.serialize_field("data", &rows)?;
        st.end()
    }

    #[derive(Deserialize)]
    struct Raw {
        shape: [usize; 2],
        data: Vec<Vec<f64>>,
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let raw = Raw::deserialize(d)?;
        let [r, c] = raw.shape;
        if raw.data.len() != r || raw.data.iter().any(|row| row.len() != c) {
            return Err(serde::de::Error::custom("matrix data does not match shape"));
        }
        let flat: Vec<f64> = raw.data.into_iter().flatten().collect();
        Ok(Matrix::from_row_slice(r, c, &flat))
    }
}

/// Plain JSON array.
pub mod vector_json {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::linalg::Vector;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
