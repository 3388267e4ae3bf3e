//! File formats: ASCII PLY and `x y z` text clouds, raw float depth and normal
//! blobs with a one-line ASCII header, correspondence CSV, pose JSON and the
//! scene bundle directory layout.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, NormalField, PointCloud, RigidTransform, Vec3};
use crate::matching::Correspondence;
use crate::pose::PoseEstimate;
use crate::synth::{GtCorrespondence, SyntheticScene};

pub const CLOUD_FILE: &str = "cloud.ply";
pub const DEPTH_FILE: &str = "depth.bin";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const GT_POSE_FILE: &str = "gt_pose.json";
pub const GT_CORRS_FILE: &str = "gt_corrs.csv";

const CSV_HEADER: &str = "u,v,point_index,score";

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

pub fn write_ply(cloud: &PointCloud) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    for p in cloud.points() {
        s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    s
}

/// Reads the ASCII PLY subset: a single vertex element whose first three
/// properties are x, y, z. Extra per-vertex columns are ignored.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(parse_err("missing ply magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut ascii = false;
    for line in lines.by_ref() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", _] => ascii = true,
            ["format", ..] => return Err(parse_err("only ascii ply is supported")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| parse_err(format!("vertex count: {e}")))?)
            }
            ["element", ..] => {}
            ["property", _, name] if count.is_some() => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    if !ascii {
        return Err(parse_err("missing format line"));
    }
    let count = count.ok_or_else(|| parse_err("missing vertex element"))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(parse_err("vertex properties must start with x y z"));
    }
    let mut points = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.trim().is_empty()).take(count) {
        points.push(parse_xyz_line(line)?);
    }
    if points.len() != count {
        return Err(parse_err(format!("expected {count} vertices, found {}", points.len())));
    }
    PointCloud::new(points)
}

fn parse_xyz_line(line: &str) -> Result<Vec3> {
    let mut it = line.split_whitespace().map(|t| {
        t.parse::<f64>()
            .map_err(|e| parse_err(format!("bad coordinate {t:?}: {e}")))
    });
    let mut next = || it.next().unwrap_or_else(|| Err(parse_err(format!("short line {line:?}"))));
    Ok(Vec3::new(next()?, next()?, next()?))
}

/// Whitespace-delimited `x y z` lines; blank lines and `#` comments skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let points = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(parse_xyz_line)
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(points)
}

pub fn write_xyz(cloud: &PointCloud) -> String {
    cloud
        .points()
        .iter()
        .map(|p| format!("{} {} {}\n", p.x, p.y, p.z))
        .collect()
}

/// Loads a cloud, picking the format from the `.ply` extension.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        parse_ply(&text)
    } else {
        parse_xyz(&text)
    }
}

fn split_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| parse_err("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| parse_err(e.to_string()))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    match tokens.as_slice() {
        [m, w, h] if *m == magic => {
            let w = w.parse().map_err(|e| parse_err(format!("width: {e}")))?;
            let h = h.parse().map_err(|e| parse_err(format!("height: {e}")))?;
            Ok((w, h, &bytes[nl + 1..]))
        }
        _ => Err(parse_err(format!("expected \"{magic} <w> <h>\" header, got {header:?}"))),
    }
}

fn f32_values(body: &[u8], expected: usize) -> Result<Vec<f32>> {
    if body.len() != 4 * expected {
        return Err(Error::LengthMismatch(4 * expected, body.len()));
    }
    Ok(body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// `DEPTH <w> <h>\n` followed by row-major little-endian f32; NaN marks invalid.
pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("DEPTH {} {}\n", depth.width(), depth.height()).into_bytes();
    for (d, ok) in depth.values().iter().zip(depth.valid_mask()) {
        let v = if *ok { *d as f32 } else { f32::NAN };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let (w, h, body) = split_header(bytes, "DEPTH")?;
    let values = f32_values(body, w * h)?;
    DepthMap::new(w, h, values.into_iter().map(f64::from).collect())
}

/// `NORMAL <w|count> <h|1>\n` followed by three little-endian f32 per element.
pub fn encode_normals(field: &NormalField) -> Vec<u8> {
    let mut out = format!("NORMAL {} {}\n", field.width(), field.height()).into_bytes();
    for (n, ok) in field.normals().iter().zip(field.valid_mask()) {
        for c in 0..3 {
            let v = if *ok { n[c] as f32 } else { f32::NAN };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes a normal blob. Entries with any NaN component are invalid; valid
/// entries are renormalised to absorb f32 rounding.
pub fn decode_normals(bytes: &[u8]) -> Result<NormalField> {
    let (w, h, body) = split_header(bytes, "NORMAL")?;
    let values = f32_values(body, 3 * w * h)?;
    let mut normals = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for c in values.chunks_exact(3) {
        let n = Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64);
        if n.iter().all(|x| x.is_finite()) && n.norm() > 0.0 {
            normals.push(n.normalize());
            valid.push(true);
        } else {
            normals.push(Vec3::zeros());
            valid.push(false);
        }
    }
    NormalField::new(w, h, normals, valid)
}

pub fn write_correspondences_csv(corrs: &[Correspondence]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for c in corrs {
        s.push_str(&format!("{},{},{},{}\n", c.u, c.v, c.point_index, c.score));
    }
    s
}

pub fn parse_correspondences_csv(text: &str) -> Result<Vec<Correspondence>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(parse_err(format!("expected header {CSV_HEADER:?}, got {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(parse_err(format!("row {}: expected 4 fields", i + 1)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("row {}: {e}", i + 1)));
            Ok(Correspondence {
                u: num(f[0])?,
                v: num(f[1])?,
                point_index: f[2].parse().map_err(|e| parse_err(format!("row {}: {e}", i + 1)))?,
                score: num(f[3])?,
            })
        })
        .collect()
}

/// Pose output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub inliers: usize,
    pub mean_reproj_px: f64,
}

impl PoseJson {
    pub fn from_estimate(est: &PoseEstimate) -> Self {
        let t = est.transform.translation();
        Self {
            rotation: est.transform.rotation_row_major(),
            translation: [t.x, t.y, t.z],
            inliers: est.inlier_count(),
            mean_reproj_px: est.mean_reprojection_error,
        }
    }

    pub fn transform(&self) -> Result<RigidTransform> {
        RigidTransform::from_row_major(self.rotation, self.translation)
    }
}

/// Ground-truth pose plus the scene seed used to derive features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtPoseJson {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub seed: u64,
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| parse_err(e.to_string()))
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(bytes)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes `cloud.ply`, `depth.bin`, `intrinsics.json`, `gt_pose.json` and
/// `gt_corrs.csv` into `dir`, creating it when missing.
pub fn save_scene(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join(CLOUD_FILE), write_ply(&scene.cloud).as_bytes())?;
    write_file(&dir.join(DEPTH_FILE), &encode_depth(&scene.depth))?;
    write_file(&dir.join(INTRINSICS_FILE), to_json_pretty(&scene.intrinsics)?.as_bytes())?;
    let t = scene.gt_transform.translation();
    let gt = GtPoseJson {
        rotation: scene.gt_transform.rotation_row_major(),
        translation: [t.x, t.y, t.z],
        seed: scene.seed,
    };
    write_file(&dir.join(GT_POSE_FILE), to_json_pretty(&gt)?.as_bytes())?;
    let corrs: Vec<Correspondence> = scene
        .gt_correspondences
        .iter()
        .map(|g| Correspondence::new(g.u, g.v, g.point_index, 1.0))
        .collect();
    write_file(&dir.join(GT_CORRS_FILE), write_correspondences_csv(&corrs).as_bytes())
}

pub fn load_scene(dir: &Path) -> Result<SyntheticScene> {
    let cloud = parse_ply(&read_text(&dir.join(CLOUD_FILE))?)?;
    let depth_path = dir.join(DEPTH_FILE);
    let depth_bytes = fs::read(&depth_path).map_err(|e| Error::Io(format!("{}: {e}", depth_path.display())))?;
    let depth = decode_depth(&depth_bytes)?;
    let intrinsics: CameraIntrinsics = from_json(&read_text(&dir.join(INTRINSICS_FILE))?)?;
    intrinsics.validate()?;
    if (depth.width(), depth.height()) != (intrinsics.width, intrinsics.height) {
        return Err(Error::ShapeMismatch("depth map size differs from intrinsics".into()));
    }
    let gt: GtPoseJson = from_json(&read_text(&dir.join(GT_POSE_FILE))?)?;
    let gt_transform = RigidTransform::from_row_major(gt.rotation, gt.translation)?;
    let gt_correspondences = parse_correspondences_csv(&read_text(&dir.join(GT_CORRS_FILE))?)?
        .into_iter()
        .map(|c| {
            if c.point_index >= cloud.len() {
                return Err(parse_err(format!("gt point index {} out of range", c.point_index)));
            }
            Ok(GtCorrespondence {
                u: c.u,
                v: c.v,
                point_index: c.point_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        cloud,
        depth,
        intrinsics,
        gt_transform,
        gt_correspondences,
        seed: gt.seed,
    })
}
