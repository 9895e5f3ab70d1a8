//! On-disk formats: binary frames, sequence directories and detection records.
//!
//! Frame layout (little-endian):
//!
//! ```text
//! magic       8 bytes  "FMFPC1\0\0"
//! version     u32      1
//! timestamp   f64
//! has_pose    u8
//! pose        3 x f64  (tx, ty, yaw), only when has_pose == 1
//! num_points  u32
//! points      num_points x 4 x f32 (x, y, z, intensity)
//! num_boxes   u32
//! boxes       num_boxes x (9 x f32 + u32) (cx, cy, cz, w, l, h, yaw, vx, vy, class_id)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Box3D, Point, PointCloudFrame, Pose2D, SceneSequence};

pub const FRAME_MAGIC: [u8; 8] = *b"FMFPC1\0\0";
pub const FRAME_VERSION: u32 = 1;
pub const POINT_RECORD_BYTES: usize = 4 * 4;
pub const BOX_RECORD_BYTES: usize = 9 * 4 + 4;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Exact encoded size of a frame.
pub fn encoded_frame_len(frame: &PointCloudFrame) -> usize {
    let pose = if frame.ego_pose.is_some() { 24 } else { 0 };
    8 + 4 + 8 + 1 + pose + 4 + frame.points.len() * POINT_RECORD_BYTES + 4
        + frame.gt_boxes.len() * BOX_RECORD_BYTES
}

pub fn encode_frame(frame: &PointCloudFrame) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_frame_len(frame));
    buf.extend_from_slice(&FRAME_MAGIC);
    buf.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    buf.extend_from_slice(&frame.timestamp.to_le_bytes());
    match frame.ego_pose {
        Some(p) => {
            buf.push(1);
            for v in [p.tx, p.ty, p.yaw] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => buf.push(0),
    }
    buf.extend_from_slice(&(frame.points.len() as u32).to_le_bytes());
    for p in &frame.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(frame.gt_boxes.len() as u32).to_le_bytes());
    for b in &frame.gt_boxes {
        for v in [b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw, b.vx, b.vy] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&(b.class_id as u32).to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::io(
                self.path,
                std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    format!(
                        "truncated frame: need {n} bytes at offset {}, have {}",
                        self.pos,
                        self.bytes.len() - self.pos
                    ),
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<PointCloudFrame> {
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.take(8)?;
    if magic != FRAME_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let version = cur.u32()?;
    if version != FRAME_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let timestamp = cur.f64()?;
    let ego_pose = match cur.u8()? {
        0 => None,
        1 => Some(Pose2D {
            tx: cur.f64()?,
            ty: cur.f64()?,
            yaw: cur.f64()?,
        }),
        other => return Err(format_err(format!("bad has_pose flag {other}"))),
    };
    let num_points = cur.u32()? as usize;
    let mut points = Vec::with_capacity(num_points.min(bytes.len() / POINT_RECORD_BYTES));
    for _ in 0..num_points {
        points.push(Point {
            x: cur.f32()?,
            y: cur.f32()?,
            z: cur.f32()?,
            intensity: cur.f32()?,
        });
    }
    let num_boxes = cur.u32()? as usize;
    let mut gt_boxes = Vec::with_capacity(num_boxes.min(bytes.len() / BOX_RECORD_BYTES));
    for _ in 0..num_boxes {
        gt_boxes.push(Box3D {
            cx: cur.f32()?,
            cy: cur.f32()?,
            cz: cur.f32()?,
            w: cur.f32()?,
            l: cur.f32()?,
            h: cur.f32()?,
            yaw: cur.f32()?,
            vx: cur.f32()?,
            vy: cur.f32()?,
            class_id: cur.u32()? as usize,
        });
    }
    if cur.pos != bytes.len() {
        return Err(format_err(format!(
            "{} trailing bytes after frame payload",
            bytes.len() - cur.pos
        )));
    }
    Ok(PointCloudFrame {
        points,
        timestamp,
        ego_pose,
        gt_boxes,
    })
}

pub fn write_frame(frame: &PointCloudFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_frame(frame)).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<PointCloudFrame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub frames: Vec<String>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.bin")
}

pub fn write_sequence(seq: &SceneSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(seq.frames.len());
    for (i, frame) in seq.frames.iter().enumerate() {
        let name = frame_file_name(i);
        write_frame(frame, dir.join(&name))?;
        names.push(name);
    }
    let manifest = Manifest {
        class_names: seq.class_names.clone(),
        frames: names,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(dir: impl AsRef<Path>) -> Result<SceneSequence> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let frames = manifest
        .frames
        .iter()
        .map(|name| read_frame(dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    let seq = SceneSequence {
        frames,
        class_names: manifest.class_names,
    };
    seq.validate()?;
    Ok(seq)
}

/// Loads either a single sequence directory or a directory whose
/// subdirectories are sequences (visited in sorted name order).
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<SceneSequence>> {
    let root = root.as_ref();
    if root.join(MANIFEST_NAME).is_file() {
        return Ok(vec![read_sequence(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_NAME).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!(
            "no sequences found under {}",
            root.display()
        )));
    }
    let seqs = dirs.iter().map(read_sequence).collect::<Result<Vec<_>>>()?;
    let classes = &seqs[0].class_names;
    if seqs.iter().any(|s| &s.class_names != classes) {
        return Err(Error::Data("sequences disagree on class names".into()));
    }
    Ok(seqs)
}

pub fn write_dataset(seqs: &[SceneSequence], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for (i, seq) in seqs.iter().enumerate() {
        write_sequence(seq, root.join(format!("seq_{i:04}")))?;
    }
    Ok(())
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: usize,
    pub class: String,
    pub score: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

pub fn write_detections(records: &[DetectionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", lineno + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f32_exact(v: f32) -> f64 {
        v as f64
    }

    fn arb_frame() -> impl Strategy<Value = PointCloudFrame> {
        let point = (-1e5f32..1e5, -1e5f32..1e5, -50f32..50.0, 0.0f32..=1.0).prop_map(
            |(x, y, z, i)| Point::new(f32_exact(x), f32_exact(y), f32_exact(z), f32_exact(i)),
        );
        let bx = (prop::array::uniform9(-100.0f32..100.0), 0usize..5).prop_map(|(v, c)| Box3D {
            cx: v[0] as f64,
            cy: v[1] as f64,
            cz: v[2] as f64,
            w: v[3] as f64,
            l: v[4] as f64,
            h: v[5] as f64,
            yaw: v[6] as f64,
            vx: v[7] as f64,
            vy: v[8] as f64,
            class_id: c,
        });
        let pose = prop::option::of((-1e4f64..1e4, -1e4f64..1e4, -3.14f64..3.14).prop_map(
            |(tx, ty, yaw)| Pose2D { tx, ty, yaw },
        ));
        (
            prop::collection::vec(point, 0..64),
            0.0f64..1e6,
            pose,
            prop::collection::vec(bx, 0..8),
        )
            .prop_map(|(points, timestamp, ego_pose, gt_boxes)| PointCloudFrame {
                points,
                timestamp,
                ego_pose,
                gt_boxes,
            })
    }

    proptest! {
        #[test]
        fn frame_round_trip_is_bit_exact(frame in arb_frame()) {
            let bytes = encode_frame(&frame);
            prop_assert_eq!(bytes.len(), encoded_frame_len(&frame));
            let back = decode_frame(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back, frame);
        }
    }

    #[test]
    fn write_read_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = PointCloudFrame {
            points: vec![Point::new(1.5, -2.25, 0.125, 0.5)],
            timestamp: 0.125,
            ego_pose: Some(Pose2D::new(3.0, 4.0, 0.1)),
            gt_boxes: vec![Box3D {
                cx: 1.0,
                cy: 2.0,
                cz: -1.0,
                w: 1.5,
                l: 4.0,
                h: 1.75,
                yaw: 0.5,
                vx: 1.0,
                vy: -0.5,
                class_id: 1,
            }],
        };
        let path = dir.path().join("f.bin");
        write_frame(&frame, &path).unwrap();
        assert_eq!(read_frame(&path).unwrap(), frame);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_frame(&PointCloudFrame::default());
        bytes[0] = b'X';
        let err = decode_frame(&bytes, Path::new("bad")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn wrong_version_is_format_error() {
        let mut bytes = encode_frame(&PointCloudFrame::default());
        bytes[8] = 2;
        assert!(matches!(
            decode_frame(&bytes, Path::new("bad")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let frame = PointCloudFrame {
            points: vec![Point::new(1.0, 2.0, 3.0, 0.5); 4],
            ..Default::default()
        };
        let bytes = encode_frame(&frame);
        let err = decode_frame(&bytes[..bytes.len() - 7], Path::new("short")).unwrap_err();
        match err {
            Error::Io { source, .. } => {
                assert_eq!(source.kind(), std::io::ErrorKind::UnexpectedEof)
            }
            other => panic!("expected io error, got {other}"),
        }
    }

    #[test]
    fn sixty_thousand_point_file_size() {
        // 8 magic + 4 version + 8 timestamp + 1 flag + 4 count, then 16 bytes
        // per point and a 4-byte empty box count.
        let frame = PointCloudFrame {
            points: vec![Point::new(0.0, 0.0, 0.0, 0.0); 60_000],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.bin");
        write_frame(&frame, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 25 + 60_000 * 16 + 4);
        assert_eq!(len, 960_029);
    }

    #[test]
    fn detection_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.jsonl");
        let recs = vec![DetectionRecord {
            frame: 3,
            class: "car".into(),
            score: 0.75,
            center: [1.0, 2.0, 3.0],
            size: [1.9, 4.5, 1.6],
            yaw: -0.25,
            velocity: [0.5, 0.0],
        }];
        write_detections(&recs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"frame\":3,\"class\":\"car\",\"score\":0.75,\"center\""));
        assert_eq!(read_detections(&path).unwrap(), recs);
    }
}
