//! JSON model files.
//!
//! ```json
//! {"version":1,"vocab_size":4,"d":2,"eos_id":0,
//!  "embedding":[[..d..], ..vocab_size rows..],
//!  "recurrence":[[..d..], ..d rows..],
//!  "output_weight":[[..d..], ..vocab_size rows..],
//!  "output_bias":[..vocab_size..],
//!  "eos_bias":0.0}
//! ```
//!
//! Matrices are arrays of rows. Reals are written with 17 significant digits
//! so `f64` parameters survive a save/load cycle bit-for-bit.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use crate::error::LoadError;
use crate::Scalar;

use super::RecurrentModel;

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    vocab_size: usize,
    d: usize,
    eos_id: u32,
    embedding: Vec<Vec<f64>>,
    recurrence: Vec<Vec<f64>>,
    output_weight: Vec<Vec<f64>>,
    output_bias: Vec<f64>,
    eos_bias: f64,
}

/// Compact JSON with `{:.16e}` reals (17 significant digits).
struct SeventeenDigits;

impl Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

fn rows_of<T: Scalar>(flat: &[T], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks_exact(cols)
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect()
}

fn flatten<T: Scalar>(field: &str, rows: Vec<Vec<f64>>, n_rows: usize, n_cols: usize) -> Result<Vec<T>, LoadError> {
    if rows.len() != n_rows {
        return Err(LoadError::Dimension {
            field: format!("{field} rows"),
            expected: n_rows,
            found: rows.len(),
        });
    }
    let mut out = Vec::with_capacity(n_rows * n_cols);
    for (i, row) in rows.into_iter().enumerate() {
        if row.len() != n_cols {
            return Err(LoadError::Dimension {
                field: format!("{field}[{i}] columns"),
                expected: n_cols,
                found: row.len(),
            });
        }
        out.extend(row.into_iter().map(T::of));
    }
    Ok(out)
}

/// Writes `model` in the documented JSON layout.
pub fn save_linear_model<T: Scalar>(model: &RecurrentModel<T>, path: impl AsRef<Path>) -> io::Result<()> {
    let file = ModelFile {
        version: MODEL_FILE_VERSION,
        vocab_size: model.vocab_size,
        d: model.dim,
        eos_id: model.eos_id,
        embedding: rows_of(&model.embedding, model.dim),
        recurrence: rows_of(&model.recurrence, model.dim),
        output_weight: rows_of(&model.output_weight, model.dim),
        output_bias: model.output_bias.iter().map(|x| x.as_f64()).collect(),
        eos_bias: model.eos_bias.as_f64(),
    };
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    file.serialize(&mut ser).map_err(io::Error::other)?;
    buf.push(b'\n');
    fs::write(path, buf)
}

/// Reads a model file. Either returns a fully validated model or an error;
/// nothing partial escapes.
pub fn load_linear_model<T: Scalar>(path: impl AsRef<Path>) -> Result<RecurrentModel<T>, LoadError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| LoadError::Parse(e.to_string()))?;
    if file.version != MODEL_FILE_VERSION {
        return Err(LoadError::Version {
            found: file.version,
            expected: MODEL_FILE_VERSION,
        });
    }
    let (v, d) = (file.vocab_size, file.d);
    let embedding = flatten("embedding", file.embedding, v, d)?;
    let recurrence = flatten("recurrence", file.recurrence, d, d)?;
    let output_weight = flatten("output_weight", file.output_weight, v, d)?;
    if file.output_bias.len() != v {
        return Err(LoadError::Dimension {
            field: "output_bias".into(),
            expected: v,
            found: file.output_bias.len(),
        });
    }
    let output_bias = file.output_bias.into_iter().map(T::of).collect();
    RecurrentModel::new(
        v,
        d,
        file.eos_id,
        embedding,
        recurrence,
        output_weight,
        output_bias,
        T::of(file.eos_bias),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decode_greedy, make_toy_model, TokenSequence};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = make_toy_model::<f64>(1, 3, 6, -0.5).unwrap();
        save_linear_model(&m, &path).unwrap();
        let back: RecurrentModel<f64> = load_linear_model(&path).unwrap();
        assert_eq!(back, m);
        let prompt = TokenSequence::new(vec![2, 5, 1]);
        assert_eq!(decode_greedy(&back, &prompt, 20).unwrap(), decode_greedy(&m, &prompt, 20).unwrap());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_linear_model::<f64>("/nonexistent/model.json").unwrap_err();
        assert!(matches!(err, LoadError::Io { .. }));
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_linear_model(&make_toy_model::<f64>(1, 2, 4, 0.0).unwrap(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_linear_model::<f64>(&path), Err(LoadError::Parse(_))));
    }

    #[test]
    fn wrong_weight_rows_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_linear_model(&make_toy_model::<f64>(1, 2, 4, 0.0).unwrap(), &path).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        json["output_weight"].as_array_mut().unwrap().pop();
        fs::write(&path, json.to_string()).unwrap();
        let err = load_linear_model::<f64>(&path).unwrap_err();
        match &err {
            LoadError::Dimension { field, expected, found } => {
                assert!(field.starts_with("output_weight"));
                assert_eq!((*expected, *found), (4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn reals_use_seventeen_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_linear_model(&make_toy_model::<f64>(3, 1, 2, 0.25).unwrap(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"eos_bias\":2.5000000000000000e-1"), "{text}");
    }
}
