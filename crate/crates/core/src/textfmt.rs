//! Line-oriented tensor text format: `name shape v1 v2 ...`.
//!
//! Shapes are `1` for scalars, `n` for vectors and `RxC` for row-major
//! matrices. Values use Rust's shortest round-trip exponent notation, so a
//! write/read cycle is bit-exact.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub fn write_values(out: &mut String, name: &str, shape: &str, values: impl IntoIterator<Item = f64>) {
    out.push_str(name);
    out.push(' ');
    out.push_str(shape);
    for v in values {
        // `{:e}` is shortest-repr and round-trips exactly.
        let _ = write!(out, " {v:e}");
    }
    out.push('\n');
}

pub fn write_scalar(out: &mut String, name: &str, v: f64) {
    write_values(out, name, "1", [v]);
}

pub fn write_vector(out: &mut String, name: &str, v: &[f64]) {
    write_values(out, name, &v.len().to_string(), v.iter().copied());
}

pub fn write_matrix(out: &mut String, name: &str, rows: usize, cols: usize, v: impl IntoIterator<Item = f64>) {
    write_values(out, name, &format!("{rows}x{cols}"), v);
}

/// One parsed tensor line.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorLine {
    pub name: String,
    pub rows: usize,
    /// `None` for scalars and vectors.
    pub cols: Option<usize>,
    pub values: Vec<f64>,
}

pub fn parse_line(line: &str, lineno: usize) -> Result<TensorLine> {
    let err = |msg: String| Error::Parse { line: lineno, msg };
    let mut parts = line.split_whitespace();
    let name = parts.next().ok_or_else(|| err("missing tensor name".into()))?.to_owned();
    let shape = parts.next().ok_or_else(|| err(format!("missing shape for `{name}`")))?;
    let (rows, cols) = match shape.split_once('x') {
        Some((r, c)) => (
            r.parse().map_err(|_| err(format!("bad shape `{shape}`")))?,
            Some(c.parse().map_err(|_| err(format!("bad shape `{shape}`")))?),
        ),
        None => (shape.parse().map_err(|_| err(format!("bad shape `{shape}`")))?, None),
    };
    let values = parts
        .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    let expected = rows * cols.unwrap_or(1);
    if values.len() != expected {
        return Err(err(format!("`{name}` declares {expected} values, found {}", values.len())));
    }
    Ok(TensorLine { name, rows, cols, values })
}
