//! Deterministic text output: fixed `%.12e` float formatting, canonical
//! (sorted-key) JSON and CSV tables.

use std::io::Write;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Formats like C's `%.12e`: twelve fraction digits and a signed exponent of
/// at least two digits. Non-finite values print as `nan`, `inf`, `-inf`.
pub fn format_e12(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{v:.12e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |out: &mut String, k: usize| out.extend(std::iter::repeat_n(' ', 2 * k));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let f = n.as_f64().unwrap_or(f64::NAN);
                if f.is_finite() {
                    out.push_str(&format_e12(f));
                } else {
                    out.push_str("null");
                }
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // Short numeric rows stay on one line.
            if items.iter().all(|x| x.is_number() || x.is_null()) && items.len() <= 16 {
                out.push('[');
                for (i, x) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, x, indent);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (i, x) in items.iter().enumerate() {
                pad(out, indent + 1);
                write_value(out, x, indent + 1);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(out, indent + 1);
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_value(out, &map[k.as_str()], indent + 1);
                if i + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, indent);
            out.push('}');
        }
    }
}

/// Pretty JSON with sorted keys and `%.12e` floats; non-finite floats
/// become `null`. Integers are printed as integers.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

/// Writes a header and rows of floats as CSV with `%.12e` cells.
pub fn write_csv<W: Write>(writer: W, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io_err = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(header).map_err(io_err)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Dimension(format!("csv row has {} cells, header has {}", row.len(), header.len())));
        }
        w.write_record(row.iter().map(|v| format_e12(*v))).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}

/// Reads a float table written by [`write_csv`].
pub fn read_csv<R: std::io::Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(reader);
    let err = |e: csv::Error| Error::Serialization(e.to_string());
    let header = r.headers().map_err(err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Serialization(format!("bad cell '{s}': {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[test]
    fn c_style_exponent() {
        assert_eq!(format_e12(0.1234567890123), "1.234567890123e-01");
        assert_eq!(format_e12(0.0), "0.000000000000e+00");
        assert_eq!(format_e12(-2.5e100), "-2.500000000000e+100");
        assert_eq!(format_e12(1.0), "1.000000000000e+00");
        assert_eq!(format_e12(f64::NAN), "nan");
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Sample {
        zeta: f64,
        alpha: Vec<f64>,
        count: usize,
        label: String,
        missing: Option<f64>,
    }

    #[test]
    fn canonical_json_round_trip() {
        let s = Sample {
            zeta: 1.0 / 3.0,
            alpha: vec![1.0, -2.0e-7],
            count: 3,
            label: "a\"b".into(),
            missing: None,
        };
        let text = to_canonical_json(&s).unwrap();
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
        assert!(text.contains("\"count\": 3"));
        assert!(text.contains("3.333333333333e-01"));
        let back: Sample = serde_json::from_str(&text).unwrap();
        assert_eq!(back.count, 3);
        assert!((back.zeta - s.zeta).abs() < 1e-12);
        assert_eq!(text, to_canonical_json(&back).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        let header = vec!["t".to_string(), "x1".to_string()];
        write_csv(&mut buf, &header, vec![vec![0.0, 1.0], vec![0.5, 0.25]]).unwrap();
        let (h, rows) = read_csv(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![0.5, 0.25]]);
    }
}
