//! Trial files: IMU, reference and estimate CSVs, step events, JSON.
//!
//! Every CSV starts with a `# ckfgait <kind> format_version N` line followed
//! by a header row. Numbers are written with 17 significant digits so a
//! write-read cycle is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::body::{Joint, PoseSnapshot, SegmentOrientations, Side};
use crate::ckf::StepDiagnostics;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::preprocess::{RawFrame, RawImuSample, StepEvents};
use crate::so3::{Quat, Vec3};

pub const CSV_FORMAT_VERSION: u32 = 1;

pub const IMU_FILE: &str = "imu.csv";
pub const REFERENCE_FILE: &str = "reference.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const METRICS_FILE: &str = "metrics.json";

/// Accepted deviation of a stored quaternion from unit norm.
pub const QUAT_NORM_TOL: f64 = 1e-3;

const SENSORS: [&str; 3] = ["pelvis", "lshank", "rshank"];
const SEGMENTS: [&str; 5] = ["pelvis", "left_thigh", "right_thigh", "left_shank", "right_shank"];
const DEBUG_COLUMNS: [&str; 3] = ["dbg_sckf_iterations", "dbg_sckf_converged", "dbg_max_residual"];

/// Contents of a trial directory.
#[derive(Debug, Clone, Default)]
pub struct TrialFileSet {
    pub raw: Vec<RawFrame>,
    pub reference: Option<Vec<PoseSnapshot>>,
    pub events: Option<StepEvents>,
    pub config: Option<RunConfig>,
}

impl TrialFileSet {
    /// Reads `imu.csv` and whichever of the optional files exist.
    pub fn load(dir: &Path) -> Result<Self> {
        let raw = read_imu_csv(&dir.join(IMU_FILE))?;
        let reference = optional(&dir.join(REFERENCE_FILE), read_pose_csv)?;
        let n = raw.len();
        if let Some(r) = &reference {
            if r.len() != n {
                return Err(Error::InvalidFile {
                    path: dir.join(REFERENCE_FILE),
                    message: format!("{} frames, imu has {n}", r.len()),
                });
            }
            for (k, (a, b)) in raw.iter().zip(r).enumerate() {
                if a.timestamp() != b.timestamp {
                    return Err(Error::InvalidFile {
                        path: dir.join(REFERENCE_FILE),
                        message: format!("timestamp of frame {k} differs from imu.csv"),
                    });
                }
            }
        }
        let events = optional(&dir.join(EVENTS_FILE), |p| read_events_csv(p, n))?;
        let config = optional(&dir.join(CONFIG_FILE), RunConfig::load)?;
        Ok(Self { raw, reference, events, config })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
        write_imu_csv(&dir.join(IMU_FILE), &self.raw)?;
        if let Some(r) = &self.reference {
            write_pose_csv(&dir.join(REFERENCE_FILE), r, None)?;
        }
        if let Some(e) = &self.events {
            write_events_csv(&dir.join(EVENTS_FILE), e)?;
        }
        if let Some(c) = &self.config {
            write_json(&dir.join(CONFIG_FILE), c)?;
        }
        Ok(())
    }
}

fn optional<T>(path: &Path, read: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        read(path).map(Some)
    } else {
        Ok(None)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_bytes(kind: &str, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut out = format!("# ckfgait {kind} format_version {CSV_FORMAT_VERSION}\n").into_bytes();
    {
        let mut w = csv::WriterBuilder::new().from_writer(&mut out);
        w.write_record(header).expect("in-memory write");
        for row in rows {
            w.write_record(&row).expect("in-memory write");
        }
        w.flush().expect("in-memory write");
    }
    out
}

/// Parsed rows with 1-based file line numbers.
struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path, kind: &str) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut reader = BufReader::new(file);
        let mut first = String::new();
        reader.read_line(&mut first).map_err(io_err(path))?;
        let expected = format!("# ckfgait {kind} format_version ");
        let version = first
            .trim_end()
            .strip_prefix(&expected)
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected a `{expected}N` line"),
            })?;
        if version != CSV_FORMAT_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unsupported format_version {version}"),
            });
        }
        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let parse_err = |e: csv::Error| {
            let line = e.position().map(|p| p.line() + 1).unwrap_or(0);
            Error::Parse { path: path.to_path_buf(), line, message: e.to_string() }
        };
        let header: Vec<String> = csv.headers().map_err(parse_err)?.iter().map(str::to_owned).collect();
        let mut rows = Vec::new();
        for rec in csv.records() {
            let rec = rec.map_err(parse_err)?;
            let line = rec.position().map(|p| p.line() + 1).unwrap_or(0);
            rows.push((line, rec));
        }
        Ok(Self { path: path.to_path_buf(), header, rows })
    }

    fn err(&self, line: u64, message: String) -> Error {
        Error::Parse { path: self.path.clone(), line, message }
    }

    /// Column indices of `names`, which must all be present.
    fn columns(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.header
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| self.err(2, format!("missing column `{n}`")))
            })
            .collect()
    }

    fn float(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<f64> {
        let text = rec.get(col).unwrap_or("");
        let v: f64 = text
            .trim()
            .parse()
            .map_err(|_| self.err(line, format!("column `{}`: cannot parse `{text}`", self.header[col])))?;
        if !v.is_finite() {
            return Err(self.err(line, format!("column `{}`: non-finite value `{text}`", self.header[col])));
        }
        Ok(v)
    }

    fn vec3(&self, line: u64, rec: &csv::StringRecord, cols: &[usize]) -> Result<Vec3> {
        Ok(Vec3::new(self.float(line, rec, cols[0])?, self.float(line, rec, cols[1])?, self.float(line, rec, cols[2])?))
    }

    /// Unit quaternion from `w, x, y, z` columns, renormalized when close to unit norm.
    fn quat(&self, line: u64, rec: &csv::StringRecord, cols: &[usize]) -> Result<Quat> {
        let q = nalgebra::Quaternion::new(
            self.float(line, rec, cols[0])?,
            self.float(line, rec, cols[1])?,
            self.float(line, rec, cols[2])?,
            self.float(line, rec, cols[3])?,
        );
        let n = q.norm();
        if (n - 1.0).abs() > QUAT_NORM_TOL {
            return Err(self.err(line, format!("quaternion `{}` has norm {n}", self.header[cols[0]])));
        }
        // Values already at unit norm to rounding are kept bit for bit.
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            Ok(Quat::new_unchecked(q))
        } else {
            Ok(Quat::new_normalize(q))
        }
    }

    fn check_increasing(&self, times: &[(u64, f64)]) -> Result<()> {
        for w in times.windows(2) {
            if !(w[1].1 > w[0].1) {
                return Err(self.err(w[1].0, format!("timestamp {} does not increase", w[1].1)));
            }
        }
        Ok(())
    }
}

fn imu_header() -> Vec<String> {
    let mut h = vec!["timestamp".to_owned()];
    for s in SENSORS {
        for c in ["ax", "ay", "az", "qw", "qx", "qy", "qz"] {
            h.push(format!("{s}_{c}"));
        }
    }
    h
}

fn quat_fields(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn imu_csv_bytes(raw: &[RawFrame]) -> Vec<u8> {
    let rows = raw.iter().map(|f| {
        let mut row = vec![num(f.timestamp())];
        for s in [&f.pelvis, &f.left_shank, &f.right_shank] {
            row.extend(s.accel.iter().map(|v| num(*v)));
            row.extend(quat_fields(&s.sensor_orientation).map(num));
        }
        row
    });
    csv_bytes("imu", &imu_header(), rows)
}

pub fn write_imu_csv(path: &Path, raw: &[RawFrame]) -> Result<()> {
    write_atomic(path, &imu_csv_bytes(raw))
}

/// Raw frames; angular rate is not stored and reads back as zero.
pub fn read_imu_csv(path: &Path) -> Result<Vec<RawFrame>> {
    let t = Table::read(path, "imu")?;
    let cols = t.columns(&imu_header())?;
    let mut out = Vec::with_capacity(t.rows.len());
    let mut times = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let ts = t.float(*line, rec, cols[0])?;
        let mut samples = [RawImuSample {
            timestamp: ts,
            accel: Vec3::zeros(),
            gyro: Vec3::zeros(),
            sensor_orientation: Quat::identity(),
        }; 3];
        for (k, s) in samples.iter_mut().enumerate() {
            let base = 1 + 7 * k;
            s.accel = t.vec3(*line, rec, &cols[base..base + 3])?;
            s.sensor_orientation = t.quat(*line, rec, &cols[base + 3..base + 7])?;
        }
        times.push((*line, ts));
        out.push(RawFrame { pelvis: samples[0], left_shank: samples[1], right_shank: samples[2] });
    }
    t.check_increasing(&times)?;
    Ok(out)
}

fn pose_header() -> Vec<String> {
    let mut h = vec!["timestamp".to_owned()];
    for j in Joint::ALL {
        for c in ["x", "y", "z"] {
            h.push(format!("{}_{c}", j.name()));
        }
    }
    for s in SEGMENTS {
        for c in ["qw", "qx", "qy", "qz"] {
            h.push(format!("{s}_{c}"));
        }
    }
    h
}

fn segment_quats(o: &SegmentOrientations) -> [&Quat; 5] {
    [&o.pelvis, &o.left_thigh, &o.right_thigh, &o.left_shank, &o.right_shank]
}

/// Pose series as CSV; diagnostics, when given, add `dbg_` columns.
pub fn pose_csv_bytes(poses: &[PoseSnapshot], diagnostics: Option<&[StepDiagnostics]>) -> Vec<u8> {
    let mut header = pose_header();
    if diagnostics.is_some() {
        header.extend(DEBUG_COLUMNS.iter().map(|s| s.to_string()));
    }
    let kind = if diagnostics.is_some() { "estimate" } else { "pose" };
    let rows = poses.iter().enumerate().map(|(k, p)| {
        let mut row = vec![num(p.timestamp)];
        for j in Joint::ALL {
            row.extend(p.joint(j).iter().map(|v| num(*v)));
        }
        for q in segment_quats(&p.orientations) {
            row.extend(quat_fields(q).map(num));
        }
        if let Some(d) = diagnostics.and_then(|d| d.get(k)) {
            row.push(d.sckf_iterations.to_string());
            row.push(u8::from(d.sckf_converged).to_string());
            row.push(num(d.max_residual));
        }
        row
    });
    csv_bytes(kind, &header, rows)
}

pub fn write_pose_csv(path: &Path, poses: &[PoseSnapshot], diagnostics: Option<&[StepDiagnostics]>) -> Result<()> {
    if let Some(d) = diagnostics {
        if d.len() != poses.len() {
            return Err(Error::LengthMismatch { left: poses.len(), right: d.len() });
        }
    }
    write_atomic(path, &pose_csv_bytes(poses, diagnostics))
}

/// Reads a reference or estimate pose file; `dbg_` columns are ignored.
pub fn read_pose_csv(path: &Path) -> Result<Vec<PoseSnapshot>> {
    let t = match Table::read(path, "pose") {
        Ok(t) => t,
        Err(Error::Parse { line: 1, .. }) => Table::read(path, "estimate")?,
        Err(e) => return Err(e),
    };
    let cols = t.columns(&pose_header())?;
    let mut out = Vec::with_capacity(t.rows.len());
    let mut times = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let ts = t.float(*line, rec, cols[0])?;
        let mut pts = [Vec3::zeros(); 7];
        for (k, p) in pts.iter_mut().enumerate() {
            *p = t.vec3(*line, rec, &cols[1 + 3 * k..4 + 3 * k])?;
        }
        let mut q = [Quat::identity(); 5];
        for (k, v) in q.iter_mut().enumerate() {
            *v = t.quat(*line, rec, &cols[22 + 4 * k..26 + 4 * k])?;
        }
        times.push((*line, ts));
        out.push(PoseSnapshot {
            timestamp: ts,
            mid_pelvis: pts[0],
            left_hip: pts[1],
            right_hip: pts[2],
            left_knee: pts[3],
            right_knee: pts[4],
            left_ankle: pts[5],
            right_ankle: pts[6],
            orientations: SegmentOrientations {
                pelvis: q[0],
                left_thigh: q[1],
                right_thigh: q[2],
                left_shank: q[3],
                right_shank: q[4],
            },
        });
    }
    t.check_increasing(&times)?;
    Ok(out)
}

pub fn events_csv_bytes(events: &StepEvents) -> Vec<u8> {
    let header = ["side", "start_index", "end_index"].map(String::from);
    let rows = Side::BOTH.into_iter().flat_map(|side| {
        events
            .side(side)
            .iter()
            .map(move |(s, e)| vec![side.name().to_owned(), s.to_string(), e.to_string()])
    });
    csv_bytes("events", &header, rows)
}

pub fn write_events_csv(path: &Path, events: &StepEvents) -> Result<()> {
    write_atomic(path, &events_csv_bytes(events))
}

/// Step events for a trial of `n` frames.
pub fn read_events_csv(path: &Path, n: usize) -> Result<StepEvents> {
    let t = Table::read(path, "events")?;
    let cols = t.columns(&["side", "start_index", "end_index"].map(String::from))?;
    let mut events = StepEvents::default();
    for (line, rec) in &t.rows {
        let side = match rec.get(cols[0]).map(str::trim) {
            Some("left") => Side::Left,
            Some("right") => Side::Right,
            other => return Err(t.err(*line, format!("side must be `left` or `right`, got {other:?}"))),
        };
        let index = |c: usize| -> Result<usize> {
            let text = rec.get(c).unwrap_or("").trim();
            text.parse().map_err(|_| t.err(*line, format!("column `{}`: bad index `{text}`", t.header[c])))
        };
        events.side_mut(side).push((index(cols[1])?, index(cols[2])?));
    }
    events
        .validate(n)
        .map_err(|e| Error::InvalidFile { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_gait, GaitParams};

    fn short_trial() -> crate::synth::GroundTruthTrial {
        generate_gait(&GaitParams { duration: 2.0, ..Default::default() }).unwrap()
    }

    #[test]
    fn imu_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let trial = short_trial();
        let path = dir.path().join(IMU_FILE);
        write_imu_csv(&path, &trial.raw).unwrap();
        let back = read_imu_csv(&path).unwrap();
        assert_eq!(back.len(), trial.raw.len());
        for (a, b) in back.iter().zip(&trial.raw) {
            assert_eq!(a.timestamp(), b.timestamp());
            for (x, y) in [(&a.pelvis, &b.pelvis), (&a.left_shank, &b.left_shank), (&a.right_shank, &b.right_shank)] {
                assert_eq!(x.accel, y.accel);
                assert_eq!(x.sensor_orientation, y.sensor_orientation);
            }
        }
    }

    #[test]
    fn pose_and_events_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trial = short_trial();
        let path = dir.path().join(REFERENCE_FILE);
        write_pose_csv(&path, &trial.poses, None).unwrap();
        let back = read_pose_csv(&path).unwrap();
        for (a, b) in back.iter().zip(&trial.poses) {
            for j in Joint::ALL {
                assert_eq!(a.joint(j), b.joint(j));
            }
            assert_eq!(a.timestamp, b.timestamp);
        }
        let ev = dir.path().join(EVENTS_FILE);
        write_events_csv(&ev, &trial.events).unwrap();
        assert_eq!(read_events_csv(&ev, trial.len()).unwrap(), trial.events);
        assert!(read_events_csv(&ev, 3).is_err());
    }

    #[test]
    fn non_finite_value_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let trial = short_trial();
        let path = dir.path().join(IMU_FILE);
        let text = String::from_utf8(imu_csv_bytes(&trial.raw[..4])).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<&str> = lines[4].split(',').collect();
        fields[1] = "NaN";
        lines[4] = fields.join(",");
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_imu_csv(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 5);
                assert!(message.contains("pelvis_ax"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_quaternion_and_time() {
        let dir = tempfile::tempdir().unwrap();
        let trial = short_trial();
        let path = dir.path().join(IMU_FILE);
        let mut raw = trial.raw[..5].to_vec();
        raw[2].left_shank.sensor_orientation =
            Quat::new_unchecked(raw[2].left_shank.sensor_orientation.into_inner() * 1.01);
        write_imu_csv(&path, &raw).unwrap();
        assert!(matches!(read_imu_csv(&path), Err(Error::Parse { line: 5, .. })));

        let mut raw = trial.raw[..5].to_vec();
        raw[3].pelvis.timestamp = raw[2].pelvis.timestamp;
        write_imu_csv(&path, &raw).unwrap();
        assert!(matches!(read_imu_csv(&path), Err(Error::Parse { line: 6, .. })));

        let mut raw = trial.raw[..5].to_vec();
        raw[1].pelvis.sensor_orientation =
            Quat::new_unchecked(raw[1].pelvis.sensor_orientation.into_inner() * (1.0 + 5e-4));
        write_imu_csv(&path, &raw).unwrap();
        let back = read_imu_csv(&path).unwrap();
        assert!((back[1].pelvis.sensor_orientation.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn missing_header_or_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(IMU_FILE);
        std::fs::write(&path, "timestamp\n0.0\n").unwrap();
        assert!(matches!(read_imu_csv(&path), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&path, "# ckfgait imu format_version 1\ntimestamp,pelvis_ax\n0.0,1.0\n").unwrap();
        assert!(matches!(read_imu_csv(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_json(&path, &1).unwrap();
        write_json(&path, &2).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "2\n");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
