//! CSV tables, the run manifest, and atomic file output.
//!
//! Tables are RFC 4180 CSV with LF line endings. Floats are printed with 17
//! significant digits in `%.17g` style, so every value reads back to the
//! same double. Nothing time-dependent goes into a table; the wall-clock
//! timestamp lives only in `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::CliError;

/// `%.17g` formatting: 17 significant digits, trailing zeros removed,
/// exponent form outside `1e-5 <= |x| < 1e17`.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..17).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (16 - exp).max(0) as usize;
        strip_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// A named, schema-tagged CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    /// `<kind>/<version>`, recorded in the manifest.
    pub schema: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: impl Into<String>, schema: &'static str, header: &[&'static str]) -> Self {
        Table { file: file.into(), schema, header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "{}", self.file);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(format!("csv: {e}"))
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename, so a
/// reader never sees a partial file.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let io = |e: std::io::Error| CliError::Runtime(format!("writing {}: {e}", dir.join(name).display()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, dir.join(name)).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub schema: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub experiment: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Seconds since the Unix epoch; the only time-dependent output.
    pub created_unix: u64,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g17_formatting() {
        assert_eq!(fmt_g17(0.0), "0");
        assert_eq!(fmt_g17(1.0), "1");
        assert_eq!(fmt_g17(-2.5), "-2.5");
        assert_eq!(fmt_g17(0.1), "0.10000000000000001");
        assert_eq!(fmt_g17(1.5), "1.5");
        assert_eq!(fmt_g17(1e-7), "9.9999999999999995e-08");
        assert_eq!(fmt_g17(1e20), "1e+20");
        assert_eq!(fmt_g17(123456.0), "123456");
        assert_eq!(fmt_g17(f64::INFINITY), "inf");
    }

    #[test]
    fn g17_round_trips() {
        let mut x = 1.2345678901234567e-12;
        for _ in 0..60 {
            let s = fmt_g17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
            assert_eq!(fmt_g17(-x).parse::<f64>().unwrap(), -x);
            x *= 3.7;
        }
        for x in [0.06, 1.0 / 3.0, 2f64.sqrt(), f64::MIN_POSITIVE, f64::MAX] {
            assert_eq!(fmt_g17(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn csv_uses_lf_and_quotes() {
        let mut t = Table::new("t.csv", "t/1", &["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]);
        let s = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(s, "a,b\n1,\"x,y\"\n");
    }

    #[test]
    fn atomic_write_replaces_file() {
        let d = tempfile::tempdir().unwrap();
        write_atomic(d.path(), "f.csv", b"one").unwrap();
        write_atomic(d.path(), "f.csv", b"two").unwrap();
        assert_eq!(fs::read(d.path().join("f.csv")).unwrap(), b"two");
        assert!(!d.path().join(".f.csv.tmp").exists());
    }
}
