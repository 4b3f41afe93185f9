//! Columnar CSV persistence of observed paths.
//!
//! Observation file: header `t,y1..yd,F1..Fd`, one row per observation time.
//! A JSON sidecar (same stem, `.json`) carries the plan, model, true parameter
//! and noise. Doubles are written either with 17 significant digits or as C99
//! hex floats; both round-trip bit-exactly. An optional `.fine.csv` holds the
//! fine-grid trajectory (`t,y1..yd`).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::NoiseModel;
use crate::simulate::{FineGrid, PathRecord, SimulationPlan};

#[derive(Debug, Error)]
pub enum PathIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: invalid sidecar: {message}")]
    Sidecar { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    #[default]
    Decimal,
    HexFloat,
}

impl Encoding {
    pub fn format(self, v: f64) -> String {
        match self {
            Encoding::Decimal => format!("{v:.16e}"),
            Encoding::HexFloat => format_hex_float(v),
        }
    }
}

/// Contents of the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMetadata {
    pub model: String,
    pub theta0: Vec<f64>,
    pub noise: NoiseModel,
    pub plan: SimulationPlan,
    pub encoding: Encoding,
    pub dim: usize,
    /// File name of the fine-grid CSV, relative to the sidecar.
    #[serde(default)]
    pub fine_file: Option<String>,
}

/// Observations read from a CSV: times, `Y` and, when present, `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    pub times: Vec<f64>,
    /// `d × rows`.
    pub y: Array2<f64>,
    pub noise: Option<Array2<f64>>,
}

/// `0x1.8p+1` style; `inf`, `-inf` and `NaN` for non-finite values.
pub fn format_hex_float(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let mut frac = format!("{mant:013x}");
    while frac.ends_with('0') {
        frac.pop();
    }
    if frac.is_empty() {
        format!("{sign}0x{lead}p{e:+}")
    } else {
        format!("{sign}0x{lead}.{frac}p{e:+}")
    }
}

fn ldexp(mut x: f64, mut e: i32) -> f64 {
    let pow2 = |k: i32| f64::from_bits(((k + 1023) as u64) << 52);
    while e > 1023 {
        x *= pow2(1023);
        e -= 1023;
    }
    while e < -1022 {
        x *= pow2(-1022);
        e += 1022;
    }
    x * pow2(e)
}

/// Parses hex floats with at most 53 significant mantissa bits; decimal and
/// special values are delegated to `str::parse`.
pub fn parse_f64(s: &str) -> Result<f64, String> {
    let t = s.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) else {
        return t.parse::<f64>().map_err(|_| format!("not a number: {t:?}"));
    };
    let (digits, exp) = hex
        .split_once(['p', 'P'])
        .ok_or_else(|| format!("hex float without exponent: {t:?}"))?;
    let exp: i32 = exp.parse().map_err(|_| format!("bad hex float exponent: {t:?}"))?;
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let all = format!("{int}{frac}");
    let trimmed = all.trim_start_matches('0');
    if all.is_empty() || !all.chars().all(|c| c.is_ascii_hexdigit()) || trimmed.len() > 14 {
        return Err(format!("unsupported hex float mantissa: {t:?}"));
    }
    let mant = if trimmed.is_empty() { 0 } else { u64::from_str_radix(trimmed, 16).unwrap() };
    if mant >= 1 << 53 {
        return Err(format!("hex float mantissa exceeds 53 bits: {t:?}"));
    }
    let v = ldexp(mant as f64, exp - 4 * frac.len() as i32);
    Ok(if neg { -v } else { v })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PathIoError + '_ {
    move |source| PathIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sidecar path for an observation CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn fine_path(csv: &Path) -> PathBuf {
    csv.with_extension("fine.csv")
}

fn write_rows(path: &Path, header: &str, rows: usize, mut row: impl FnMut(usize, &mut String)) -> Result<(), PathIoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut line = String::with_capacity(256);
    writeln!(w, "{header}").map_err(io_err(path))?;
    for k in 0..rows {
        line.clear();
        row(k, &mut line);
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn header(d: usize, with_noise: bool) -> String {
    let mut h = String::from("t");
    for i in 1..=d {
        let _ = write!(h, ",y{i}");
    }
    if with_noise {
        for i in 1..=d {
            let _ = write!(h, ",F{i}");
        }
    }
    h
}

/// Writes the observation CSV, its sidecar and, if the record holds one, the fine grid.
pub fn write_path(record: &PathRecord, csv: &Path, encoding: Encoding) -> Result<(), PathIoError> {
    let d = record.dim();
    let f = |v: f64| encoding.format(v);
    write_rows(csv, &header(d, true), record.obs_times.len(), |k, line| {
        line.push_str(&f(record.obs_times[k]));
        for i in 0..d {
            line.push(',');
            line.push_str(&f(record.obs_y[[i, k]]));
        }
        for i in 0..d {
            line.push(',');
            line.push_str(&f(record.obs_noise[[i, k]]));
        }
    })?;
    let fine_file = match &record.fine {
        Some(fine) => {
            let p = fine_path(csv);
            write_rows(&p, &header(d, false), fine.times.len(), |k, line| {
                line.push_str(&f(fine.times[k]));
                for i in 0..d {
                    line.push(',');
                    line.push_str(&f(fine.y[[i, k]]));
                }
            })?;
            p.file_name().map(|s| s.to_string_lossy().into_owned())
        }
        None => None,
    };
    let meta = PathMetadata {
        model: record.model.clone(),
        theta0: record.theta0.clone(),
        noise: record.noise.clone(),
        plan: record.plan.clone(),
        encoding,
        dim: d,
        fine_file,
    };
    let side = sidecar_path(csv);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&side, json + "\n").map_err(io_err(&side))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> PathIoError {
    PathIoError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `t,y1..yd[,F1..Fd]` with at least one data row.
pub fn read_observations(csv: &Path) -> Result<ObservationTable, PathIoError> {
    let file = fs::File::open(csv).map_err(io_err(csv))?;
    let mut lines = BufReader::new(file).lines();
    let head = match lines.next() {
        Some(l) => l.map_err(io_err(csv))?,
        None => return Err(parse_err(csv, 1, "empty file")),
    };
    let cols: Vec<&str> = head.trim().split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(parse_err(csv, 1, "header must start with column t"));
    }
    let d = cols.iter().filter(|c| c.starts_with('y')).count();
    let with_noise = cols.len() == 1 + 2 * d;
    let expected = header(d, with_noise);
    if d == 0 || cols.join(",") != expected {
        return Err(parse_err(csv, 1, format!("expected header {expected:?} or t,y1..yd")));
    }

    let width = cols.len();
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(io_err(csv))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(parse_err(csv, lineno, format!("expected {width} fields, found {}", fields.len())));
        }
        for (j, field) in fields.iter().enumerate() {
            let v = parse_f64(field).map_err(|m| parse_err(csv, lineno, format!("column {}: {m}", cols[j])))?;
            if !v.is_finite() {
                return Err(parse_err(csv, lineno, format!("column {}: non-finite value", cols[j])));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(csv, 2, "no data rows"));
    }
    let table = Array2::from_shape_vec((rows, width), values).expect("row-major table");
    let times = table.column(0).to_vec();
    let y = table.slice(ndarray::s![.., 1..=d]).t().to_owned();
    let noise = with_noise.then(|| table.slice(ndarray::s![.., d + 1..]).t().to_owned());
    Ok(ObservationTable { times, y, noise })
}

pub fn read_metadata(csv: &Path) -> Result<PathMetadata, PathIoError> {
    let side = sidecar_path(csv);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|e| PathIoError::Sidecar {
        path: side,
        message: e.to_string(),
    })
}

/// Reads a path written by [`write_path`], sidecar and fine grid included.
pub fn read_path(csv: &Path) -> Result<PathRecord, PathIoError> {
    let meta = read_metadata(csv)?;
    let obs = read_observations(csv)?;
    let side = sidecar_path(csv);
    let bad = |message: String| PathIoError::Sidecar {
        path: side.clone(),
        message,
    };
    if obs.y.nrows() != meta.dim {
        return Err(bad(format!("sidecar dim {} but CSV has {} state columns", meta.dim, obs.y.nrows())));
    }
    let obs_noise = obs.noise.ok_or_else(|| bad("CSV lacks noise columns F1..Fd".into()))?;
    let fine = match &meta.fine_file {
        Some(name) => {
            let p = csv.parent().unwrap_or(Path::new(".")).join(name);
            let t = read_observations(&p)?;
            Some(FineGrid { times: t.times, y: t.y })
        }
        None => None,
    };
    Ok(PathRecord {
        fine,
        obs_times: obs.times,
        obs_y: obs.y,
        obs_noise,
        plan: meta.plan,
        model: meta.model,
        theta0: meta.theta0,
        noise: meta.noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fgn::HurstIndex;
    use crate::models::model_by_name;
    use crate::simulate::{simulate_path, ObservationScheme};
    use proptest::prelude::*;

    fn record(keep_fine: bool) -> PathRecord {
        let model = model_by_name("fou-multi", Some(2), None).unwrap();
        let noise = NoiseModel::isotropic(HurstIndex::new(0.7).unwrap(), 0.8, 2).unwrap();
        let scheme = ObservationScheme::new(32, 0.5, 1.0).unwrap();
        let mut plan = SimulationPlan::new(scheme, vec![0.1, -0.2], 5).with_substeps(4);
        if keep_fine {
            plan = plan.keeping_fine();
        }
        simulate_path(model.as_ref(), &[-1.0], &noise, &plan).unwrap()
    }

    #[test]
    fn hex_float_examples() {
        assert_eq!(format_hex_float(1.0), "0x1p+0");
        assert_eq!(format_hex_float(3.0), "0x1.8p+1");
        assert_eq!(format_hex_float(-0.0), "-0x0p+0");
        assert_eq!(format_hex_float(f64::MIN_POSITIVE / 4.0), "0x0.4p-1022");
        assert_eq!(parse_f64("0x1.8p+1").unwrap(), 3.0);
        assert_eq!(parse_f64("-0x0p+0").unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(parse_f64(" 2.5e-3 ").unwrap(), 2.5e-3);
        assert!(parse_f64("0x1.8").is_err());
        assert!(parse_f64("abc").is_err());
    }

    #[test]
    fn round_trip_in_both_encodings() {
        let dir = tempfile::tempdir().unwrap();
        for keep in [false, true] {
            let rec = record(keep);
            for enc in [Encoding::Decimal, Encoding::HexFloat] {
                let csv = dir.path().join(format!("path-{keep}-{enc:?}.csv"));
                write_path(&rec, &csv, enc).unwrap();
                let back = read_path(&csv).unwrap();
                assert_eq!(back, rec);
            }
        }
    }

    #[test]
    fn header_and_precision() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("p.csv");
        write_path(&record(false), &csv, Encoding::Decimal).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,y1,y2,F1,F2"));
        let first = lines.next().unwrap();
        assert!(first.starts_with("0.0000000000000000e0,"));
    }

    #[test]
    fn corrupt_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("bad.csv");
        fs::write(&csv, "t,y1\n0,1\n1,oops\n").unwrap();
        let err = read_observations(&csv).unwrap_err();
        assert!(matches!(err, PathIoError::Parse { line: 3, .. }), "{err}");
        fs::write(&csv, "t,y1\n0,1\n1,2,3\n").unwrap();
        assert!(matches!(read_observations(&csv), Err(PathIoError::Parse { line: 3, .. })));
        fs::write(&csv, "time,y1\n0,1\n").unwrap();
        assert!(matches!(read_observations(&csv), Err(PathIoError::Parse { line: 1, .. })));
        fs::write(&csv, "t,y1\n").unwrap();
        assert!(matches!(read_observations(&csv), Err(PathIoError::Parse { .. })));
    }

    #[test]
    fn observation_only_files_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("obs.csv");
        fs::write(&csv, "t,y1\n0,1\n0.5,0.25\n").unwrap();
        let t = read_observations(&csv).unwrap();
        assert_eq!(t.y.dim(), (1, 2));
        assert!(t.noise.is_none());
        assert!(read_path(&csv).is_err());
    }

    proptest! {
        #[test]
        fn every_finite_double_round_trips(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            for enc in [Encoding::Decimal, Encoding::HexFloat] {
                prop_assert_eq!(parse_f64(&enc.format(v)).unwrap().to_bits(), bits);
            }
        }
    }
}
