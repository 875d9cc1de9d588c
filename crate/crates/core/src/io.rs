//! File formats for sensor streams, anchors, trajectories and diagnostics.
//!
//! Binary point clouds (`.ulpc`), all little-endian:
//!
//! ```text
//! magic   4 bytes  "ULPC"
//! version u32      1
//! frames, repeated until end of file:
//!   t      f64
//!   count  u32
//!   xyz    count × 3 × f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::ins::ImuSample;
use crate::lidar::PointCloud;
use crate::outlier::RejectionDiagnostic;
use crate::uwb::{Anchor, AnchorTable, RangeMeasurement};

pub const ULPC_MAGIC: &[u8; 4] = b"ULPC";
pub const ULPC_VERSION: u32 = 1;

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Parse(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRecord {
    t: f64,
    wx: f64,
    wy: f64,
    wz: f64,
    fx: f64,
    fy: f64,
    fz: f64,
}

pub fn write_imu_csv<W: Write>(out: W, samples: &[ImuSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        let (a, f) = (s.angular_velocity, s.specific_force);
        w.serialize(ImuRecord {
            t: s.timestamp,
            wx: a.x,
            wy: a.y,
            wz: a.z,
            fx: f.x,
            fy: f.y,
            fz: f.z,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_imu_csv<R: Read>(input: R) -> Result<Vec<ImuSample>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize::<ImuRecord>() {
        let rec = rec?;
        let s = ImuSample {
            timestamp: rec.t,
            angular_velocity: Vec3::new(rec.wx, rec.wy, rec.wz),
            specific_force: Vec3::new(rec.fx, rec.fy, rec.fz),
        };
        if !(s.timestamp.is_finite()
            && s.angular_velocity.iter().all(|v| v.is_finite())
            && s.specific_force.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite("IMU record"));
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct RangeRecord {
    t: f64,
    anchor_id: u32,
    range_m: f64,
}

pub fn write_range_csv<W: Write>(out: W, ranges: &[RangeMeasurement]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in ranges {
        w.serialize(RangeRecord {
            t: r.timestamp,
            anchor_id: r.anchor_id,
            range_m: r.range,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_range_csv<R: Read>(input: R) -> Result<Vec<RangeMeasurement>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    r.deserialize::<RangeRecord>()
        .map(|rec| {
            let rec = rec?;
            RangeMeasurement::new(rec.t, rec.anchor_id, rec.range_m)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct AnchorRecord {
    id: u32,
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorFile {
    anchor: Vec<AnchorRecord>,
}

/// `[[anchor]]` tables with `id`, `x`, `y`, `z`.
pub fn anchors_to_toml(table: &AnchorTable) -> Result<String> {
    let file = AnchorFile {
        anchor: table
            .iter()
            .map(|a| AnchorRecord {
                id: a.id,
                x: a.position.x,
                y: a.position.y,
                z: a.position.z,
            })
            .collect(),
    };
    toml::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))
}

pub fn anchors_from_toml(text: &str) -> Result<AnchorTable> {
    let file: AnchorFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    AnchorTable::new(
        file.anchor
            .into_iter()
            .map(|a| Anchor {
                id: a.id,
                position: Vec3::new(a.x, a.y, a.z),
            })
            .collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRecord {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
}

/// One `t,x,y,z` line per point. Frames without points cannot be
/// represented.
pub fn write_cloud_csv<W: Write>(out: W, frames: &[PointCloud]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for f in frames {
        for p in &f.points {
            w.serialize(PointRecord {
                t: f.timestamp,
                x: p.x,
                y: p.y,
                z: p.z,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Consecutive lines with equal `t` form one frame.
pub fn read_cloud_csv<R: Read>(input: R) -> Result<Vec<PointCloud>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut frames: Vec<(f64, Vec<Vec3>)> = Vec::new();
    for rec in r.deserialize::<PointRecord>() {
        let rec = rec?;
        let p = Vec3::new(rec.x, rec.y, rec.z);
        match frames.last_mut() {
            Some((t, pts)) if *t == rec.t => pts.push(p),
            _ => frames.push((rec.t, vec![p])),
        }
    }
    frames
        .into_iter()
        .map(|(t, pts)| PointCloud::new(t, pts))
        .collect()
}

pub fn write_cloud_binary<W: Write>(mut out: W, frames: &[PointCloud]) -> Result<()> {
    out.write_all(ULPC_MAGIC)?;
    out.write_all(&ULPC_VERSION.to_le_bytes())?;
    for f in frames {
        let count = u32::try_from(f.points.len())
            .map_err(|_| Error::Parse("frame has more than u32::MAX points".into()))?;
        out.write_all(&f.timestamp.to_le_bytes())?;
        out.write_all(&count.to_le_bytes())?;
        for p in &f.points {
            for v in p.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_cloud_binary<R: Read>(mut input: R) -> Result<Vec<PointCloud>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Parse("truncated point-cloud file".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != ULPC_MAGIC {
        return Err(Error::Parse("not a ULPC point-cloud file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != ULPC_VERSION {
        return Err(Error::Parse(format!("unsupported ULPC version {version}")));
    }
    let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
    let mut frames = Vec::new();
    while let Ok(head) = take(8) {
        let t = f64_at(head);
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let body = take(count * 24)?;
        let pts = body
            .chunks_exact(24)
            .map(|c| Vec3::new(f64_at(&c[0..8]), f64_at(&c[8..16]), f64_at(&c[16..24])))
            .collect();
        frames.push(PointCloud::new(t, pts)?);
    }
    Ok(frames)
}

/// `t x y z qx qy qz qw`, space separated.
pub fn trajectory_to_tum(samples: &[(f64, Pose)]) -> String {
    let mut out = String::new();
    for (t, pose) in samples {
        let q = UnitQuaternion::from_rotation_matrix(&pose.rotation);
        let p = pose.translation;
        out.push_str(&format!(
            "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
            p.x, p.y, p.z, q.i, q.j, q.k, q.w
        ));
    }
    out
}

/// Skips blank lines and `#` comments.
pub fn trajectory_from_tum(text: &str) -> Result<Vec<(f64, Pose)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(Error::Parse(format!(
                "line {}: expected 8 fields, got {}",
                n + 1,
                v.len()
            )));
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]));
        out.push((
            v[0],
            Pose::new(q.to_rotation_matrix(), Vec3::new(v[1], v[2], v[3])),
        ));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct DiagnosticRecord {
    t: f64,
    anchor_id: u32,
    q: usize,
    inliers: usize,
    x: Option<f64>,
    y: Option<f64>,
    z: Option<f64>,
    residual_sum: Option<f64>,
}

/// Per-cycle RANSAC diagnostics; empty fields when no model was found.
pub fn write_diagnostics_csv<W: Write>(out: W, diags: &[RejectionDiagnostic]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if diags.is_empty() {
        w.write_record([
            "t",
            "anchor_id",
            "q",
            "inliers",
            "x",
            "y",
            "z",
            "residual_sum",
        ])?;
    }
    for d in diags {
        w.serialize(DiagnosticRecord {
            t: d.timestamp,
            anchor_id: d.anchor_id,
            q: d.window_len,
            inliers: d.inliers,
            x: d.position.map(|p| p.x),
            y: d.position.map(|p| p.y),
            z: d.position.map(|p| p.z),
            residual_sum: d.residual_sum,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use proptest::prelude::*;

    fn finite() -> impl Strategy<Value = f64> {
        -1e3..1e3f64
    }

    proptest! {
        #[test]
        fn imu_csv_round_trip(rows in prop::collection::vec((0.0..100.0f64, prop::array::uniform6(finite())), 0..20)) {
            let samples: Vec<ImuSample> = rows
                .iter()
                .map(|(t, v)| ImuSample {
                    timestamp: *t,
                    angular_velocity: Vec3::new(v[0], v[1], v[2]),
                    specific_force: Vec3::new(v[3], v[4], v[5]),
                })
                .collect();
            let mut buf = Vec::new();
            write_imu_csv(&mut buf, &samples).unwrap();
            prop_assert_eq!(read_imu_csv(buf.as_slice()).unwrap(), samples);
        }

        #[test]
        fn binary_cloud_round_trip(frames in prop::collection::vec(
            (0.0..100.0f64, prop::collection::vec(prop::array::uniform3(finite()), 0..30)), 0..5)) {
            let clouds: Vec<PointCloud> = frames
                .iter()
                .map(|(t, pts)| PointCloud::new(*t, pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()).unwrap())
                .collect();
            let mut buf = Vec::new();
            write_cloud_binary(&mut buf, &clouds).unwrap();
            prop_assert_eq!(buf.len(), 8 + clouds.iter().map(|c| 12 + 24 * c.points.len()).sum::<usize>());
            prop_assert_eq!(read_cloud_binary(buf.as_slice()).unwrap(), clouds);
        }

        #[test]
        fn tum_round_trip(t in 0.0..1e4f64, w in prop::array::uniform3(-3.0..3.0f64), p in prop::array::uniform3(finite())) {
            let pose = Pose::new(exp_so3(&Vec3::from(w)), Vec3::from(p));
            let back = trajectory_from_tum(&trajectory_to_tum(&[(t, pose)])).unwrap();
            prop_assert!((back[0].0 - t).abs() < 1e-6);
            prop_assert!((back[0].1.translation - pose.translation).norm() < 1e-8);
            prop_assert!((back[0].1.rotation.matrix() - pose.rotation.matrix()).norm() < 1e-8);
        }
    }

    #[test]
    fn range_csv_with_header() {
        let text = "t,anchor_id,range_m\n0.2, 3, 5.5\n0.4,1,7.25\n";
        let r = read_range_csv(text.as_bytes()).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].anchor_id, r[0].range), (3, 5.5));
        let mut buf = Vec::new();
        write_range_csv(&mut buf, &r).unwrap();
        assert_eq!(read_range_csv(buf.as_slice()).unwrap(), r);
        assert!(read_range_csv("t,anchor_id,range_m\n0.0,1,-2.0\n".as_bytes()).is_err());
    }

    #[test]
    fn anchor_toml() {
        let text = "[[anchor]]\nid = 0\nx = 1.0\ny = 2.0\nz = 3.0\n\n[[anchor]]\nid = 4\nx = -1.0\ny = 0.5\nz = 2.0\n";
        let table = anchors_from_toml(text).unwrap();
        assert_eq!(table.ids(), vec![0, 4]);
        assert_eq!(table.get(4).unwrap().position, Vec3::new(-1.0, 0.5, 2.0));
        let back = anchors_from_toml(&anchors_to_toml(&table).unwrap()).unwrap();
        assert_eq!(back.ids(), table.ids());
        assert!(anchors_from_toml("[[anchor]]\nid = 0\nx = 1.0\ny = 2.0\nz = 3.0\n[[anchor]]\nid = 0\nx = 1.0\ny = 2.0\nz = 3.0\n").is_err());
    }

    #[test]
    fn cloud_csv_groups_frames() {
        let frames = vec![
            PointCloud::new(
                0.1,
                vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)],
            )
            .unwrap(),
            PointCloud::new(0.2, vec![Vec3::new(7.0, 8.0, 9.0)]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_cloud_csv(&mut buf, &frames).unwrap();
        assert_eq!(read_cloud_csv(buf.as_slice()).unwrap(), frames);
    }

    #[test]
    fn binary_cloud_rejects_garbage() {
        assert!(read_cloud_binary(&b"NOPE\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_cloud_binary(
            &mut buf,
            &[PointCloud::new(0.0, vec![Vec3::zeros()]).unwrap()],
        )
        .unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_cloud_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn diagnostics_header_and_empty_fields() {
        let d = RejectionDiagnostic {
            timestamp: 1.0,
            anchor_id: 2,
            window_len: 20,
            inliers: 0,
            position: None,
            residual_sum: None,
        };
        let mut buf = Vec::new();
        write_diagnostics_csv(&mut buf, &[d]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "t,anchor_id,q,inliers,x,y,z,residual_sum\n1.0,2,20,0,,,,\n"
        );
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
