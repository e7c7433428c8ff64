//! CSV rate streams and ground-truth JSON.
//!
//! Streams use the header `t,wx,wy,wz` (seconds, rad/s). Parse errors name
//! the 1-based file line and the offending column.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Rotation, Vec3};
use crate::preprocess::{GyroSample, GyroStream};
use crate::sim::GroundTruth;

pub const COLUMNS: [&str; 4] = ["t", "wx", "wy", "wz"];

fn parse_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Reads a stream. Without `nominal_rate` the rate is `1 / median(dt)`.
pub fn read_stream_csv<R: Read>(reader: R, gyro_id: u8, nominal_rate: Option<f64>) -> Result<GyroStream> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, "header", e.to_string()))?
        .clone();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(parse_err(1, "header", "empty input"));
    }
    let mut index = [0usize; 4];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, name, "missing column in header"))?;
    }

    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, "record", e.to_string()))?;
        let mut v = [0.0f64; 4];
        for ((val, &col), name) in v.iter_mut().zip(&index).zip(COLUMNS) {
            let field = rec
                .get(col)
                .filter(|f| !f.is_empty())
                .ok_or_else(|| parse_err(line, name, "missing value"))?;
            *val = field
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err(line, name, e.to_string()))?;
            if !val.is_finite() {
                return Err(parse_err(line, name, "non-finite value"));
            }
        }
        samples.push(GyroSample::new(v[0], Vec3::new(v[1], v[2], v[3])));
    }
    if samples.is_empty() {
        return Err(parse_err(2, "t", "no data rows"));
    }
    let rate = match nominal_rate {
        Some(r) => r,
        None => median_rate(&samples)?,
    };
    GyroStream::new(gyro_id, samples, rate)
}

fn median_rate(samples: &[GyroSample]) -> Result<f64> {
    let mut dt: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    if dt.is_empty() {
        return Err(Error::TooFewSamples { got: samples.len(), need: 2 });
    }
    dt.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dt[dt.len() / 2];
    if !(m > 0.0) {
        return Err(Error::InvalidStream("timestamps not increasing".into()));
    }
    Ok(1.0 / m)
}

pub fn read_stream_csv_path(path: &Path, gyro_id: u8, nominal_rate: Option<f64>) -> Result<GyroStream> {
    let f = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_stream_csv(f, gyro_id, nominal_rate)
}

pub fn write_stream_csv<W: Write>(writer: W, s: &GyroStream) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(COLUMNS).map_err(io)?;
    for sample in s.samples() {
        w.serialize((sample.t, sample.w.x, sample.w.y, sample.w.z))
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Serialized ground truth. Matrices are row major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub c: [f64; 9],
    pub s1: [f64; 9],
    pub s2: [f64; 9],
    pub scales1: [f64; 3],
    pub scales2: [f64; 3],
    pub b1_0: [f64; 3],
    pub b2_0: [f64; 3],
    pub sigma_n: f64,
    pub sigma_nu: f64,
    pub rate_hz: f64,
    pub flex_segments: Vec<(f64, f64)>,
    /// Absent for noise-free scenarios.
    pub snr: Option<f64>,
    pub seed: u64,
}

fn row_major(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl TruthRecord {
    pub fn from_truth(t: &GroundTruth, seed: u64) -> Self {
        TruthRecord {
            c: t.c.to_row_major(),
            s1: row_major(&t.s1),
            s2: row_major(&t.s2),
            scales1: arr(&t.s1.diagonal()),
            scales2: arr(&t.s2.diagonal()),
            b1_0: arr(&t.b1_0),
            b2_0: arr(&t.b2_0),
            sigma_n: t.sigma_n,
            sigma_nu: t.sigma_nu,
            rate_hz: t.rate_hz,
            flex_segments: t.flex_segments.clone(),
            snr: (t.sigma_n > 0.0).then(|| t.snr()),
            seed,
        }
    }

    pub fn rotation(&self) -> Result<Rotation> {
        Rotation::from_row_major(&self.c)
    }

    /// Upper-triangular intrinsics.
    pub fn intrinsics(&self) -> (Mat3, Mat3) {
        (Mat3::from_row_slice(&self.s1), Mat3::from_row_slice(&self.s2))
    }
}

pub fn write_truth_json<W: Write>(writer: W, t: &TruthRecord) -> Result<()> {
    serde_json::to_writer_pretty(writer, t).map_err(|e| Error::Io(e.to_string()))
}

pub fn read_truth_json<R: Read>(reader: R) -> Result<TruthRecord> {
    serde_json::from_reader(reader).map_err(|e| Error::Parse {
        row: e.line(),
        column: e.column().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_scenario, Scenario};

    fn parse(text: &str) -> Result<GyroStream> {
        read_stream_csv(text.as_bytes(), 1, None)
    }

    #[test]
    fn round_trip_is_exact() {
        let (p, _) = make_scenario(&Scenario::default(), 3).unwrap();
        let s = GyroStream::new(
            1,
            p.timestamps.iter().zip(&p.w1).map(|(t, w)| GyroSample::new(*t, *w)).collect(),
            100.0,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_stream_csv(&mut buf, &s).unwrap();
        assert!(buf.starts_with(b"t,wx,wy,wz\n"));
        let back = read_stream_csv(buf.as_slice(), 1, Some(100.0)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rate_from_median_spacing() {
        let s = parse("t,wx,wy,wz\n0,1,2,3\n0.01,1,2,3\n0.02,1,2,3\n").unwrap();
        assert!((s.nominal_rate() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn column_order_is_free() {
        let s = parse("wz,t,wy,wx\n3,0,2,1\n3,1,2,1\n").unwrap();
        assert_eq!(s.samples()[0].w, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn errors_name_row_and_column() {
        match parse("t,wx,wz\n0,1,2\n") {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (1, "wy")),
            other => panic!("{other:?}"),
        }
        match parse("t,wx,wy,wz\n0,1,2,3\n0.01,1,,3\n") {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "wy")),
            other => panic!("{other:?}"),
        }
        match parse("t,wx,wy,wz\n0,1,2,3\n0.01,1,2\n") {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "wz")),
            other => panic!("{other:?}"),
        }
        match parse("t,wx,wy,wz\n0,abc,2,3\n") {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "wx")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse(""), Err(Error::Parse { .. })));
        assert!(matches!(parse("t,wx,wy,wz\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn truth_json_round_trip() {
        let (_, t) = make_scenario(&Scenario::default(), 1).unwrap();
        let rec = TruthRecord::from_truth(&t, 1);
        let mut buf = Vec::new();
        write_truth_json(&mut buf, &rec).unwrap();
        let back = read_truth_json(buf.as_slice()).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.rotation().unwrap(), t.c);
        assert!(read_truth_json("{".as_bytes()).is_err());
    }
}
