//! On-disk formats: ASCII PLY for meshes and point clouds, JSON for poses
//! and intrinsics.
//!
//! Poses serialize as `{"rotation": [9 row-major floats], "translation":
//! [3 floats]}`; intrinsics as `{"fx","fy","cx","cy","width","height"}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Mat3, PointCloud, Pose, Pt3, Vec3};

// ---------------------------------------------------------------------------
// Pose / intrinsics JSON

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseJson {
    fn from(p: &Pose) -> Self {
        let r = &p.rotation;
        PoseJson {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<&PoseJson> for Pose {
    type Error = Error;

    fn try_from(j: &PoseJson) -> Result<Pose> {
        let r = j.rotation;
        let rot = Mat3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
        Pose::new(rot, Vec3::new(j.translation[0], j.translation[1], j.translation[2]))
    }
}

pub fn save_pose(pose: &Pose, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(&PoseJson::from(pose))?)?;
    Ok(())
}

pub fn load_pose(path: &Path) -> Result<Pose> {
    let j: PoseJson = serde_json::from_slice(&std::fs::read(path)?)?;
    Pose::try_from(&j)
}

pub fn save_intrinsics(k: &Intrinsics, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(k)?)?;
    Ok(())
}

pub fn load_intrinsics(path: &Path) -> Result<Intrinsics> {
    let k: Intrinsics = serde_json::from_slice(&std::fs::read(path)?)?;
    Intrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

// ---------------------------------------------------------------------------
// ASCII PLY

/// Writes a point cloud as ASCII PLY. Colors, when present, are stored as
/// `uchar` red/green/blue.
pub fn save_cloud_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut s = String::new();
    let has_color = cloud.colors.is_some();
    s.push_str("ply\nformat ascii 1.0\ncomment corrpose point cloud\n");
    s.push_str(&format!("element vertex {}\n", cloud.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if has_color {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        if let Some(cols) = &cloud.colors {
            let c = cols[i];
            s.push_str(&format!(
                "{} {} {} {} {} {}\n",
                p.x,
                p.y,
                p.z,
                channel_u8(c[0]),
                channel_u8(c[1]),
                channel_u8(c[2])
            ));
        } else {
            s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Writes a mesh as ASCII PLY with per-vertex `uchar` colors.
pub fn save_mesh_ply(mesh: &crate::geometry::TriangleMesh, path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment corrpose mesh\n");
    s.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    s.push_str(&format!("element face {}\n", mesh.faces.len()));
    s.push_str("property list uchar int vertex_indices\n");
    s.push_str("end_header\n");
    for (p, c) in mesh.vertices.iter().zip(mesh.colors.iter()) {
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p.x,
            p.y,
            p.z,
            channel_u8(c[0]),
            channel_u8(c[1]),
            channel_u8(c[2])
        ));
    }
    for f in &mesh.faces {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn channel_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct PlyHeader {
    vertex_count: usize,
    face_count: usize,
    vertex_props: Vec<(String, String)>, // (type, name)
}

fn parse_ply_header(lines: &mut std::str::Lines, what: &Path) -> Result<PlyHeader> {
    let perr = |why: &str| Error::Parse {
        what: what.display().to_string(),
        why: why.to_string(),
    };
    if lines.next().map(str::trim) != Some("ply") {
        return Err(perr("missing 'ply' magic"));
    }
    let mut vertex_count = 0;
    let mut face_count = 0;
    let mut vertex_props = Vec::new();
    let mut in_vertex = false;
    for line in lines.by_ref() {
        let line = line.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(perr("only ascii PLY is supported"));
                }
            }
            Some("comment") => {}
            Some("element") => match (tok.next(), tok.next()) {
                (Some("vertex"), Some(n)) => {
                    vertex_count = n.parse().map_err(|_| perr("bad vertex count"))?;
                    in_vertex = true;
                }
                (Some("face"), Some(n)) => {
                    face_count = n.parse().map_err(|_| perr("bad face count"))?;
                    in_vertex = false;
                }
                _ => return Err(perr("unsupported element")),
            },
            Some("property") => {
                if in_vertex {
                    let ty = tok.next().ok_or_else(|| perr("bad property"))?;
                    if ty == "list" {
                        return Err(perr("list property on vertex element"));
                    }
                    let name = tok.next().ok_or_else(|| perr("bad property"))?;
                    vertex_props.push((ty.to_string(), name.to_string()));
                }
            }
            Some("end_header") => {
                return Ok(PlyHeader {
                    vertex_count,
                    face_count,
                    vertex_props,
                })
            }
            _ => return Err(perr("unexpected header line")),
        }
    }
    Err(perr("missing end_header"))
}

fn parse_vertices(
    lines: &mut std::str::Lines,
    header: &PlyHeader,
    what: &Path,
) -> Result<(Vec<Pt3>, Option<Vec<[f32; 3]>>)> {
    let perr = |why: String| Error::Parse {
        what: what.display().to_string(),
        why,
    };
    let find = |name: &str| header.vertex_props.iter().position(|(_, n)| n == name);
    let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(perr("missing x/y/z properties".into())),
    };
    let color_idx: Option<[usize; 3]> = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let color_is_float = color_idx
        .map(|idx| header.vertex_props[idx[0]].0.starts_with('f'))
        .unwrap_or(false);

    let mut points = Vec::with_capacity(header.vertex_count);
    let mut colors = color_idx.map(|_| Vec::with_capacity(header.vertex_count));
    for i in 0..header.vertex_count {
        let line = lines
            .next()
            .ok_or_else(|| perr(format!("missing vertex line {i}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| perr(format!("bad number in vertex {i}"))))
            .collect::<Result<_>>()?;
        if vals.len() < header.vertex_props.len() {
            return Err(perr(format!("vertex {i} has too few values")));
        }
        points.push(Pt3::new(vals[xi], vals[yi], vals[zi]));
        if let (Some(cols), Some(idx)) = (&mut colors, color_idx) {
            let scale = if color_is_float { 1.0 } else { 1.0 / 255.0 };
            cols.push([
                (vals[idx[0]] * scale) as f32,
                (vals[idx[1]] * scale) as f32,
                (vals[idx[2]] * scale) as f32,
            ]);
        }
    }
    Ok((points, colors))
}

pub fn load_cloud_ply(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = parse_ply_header(&mut lines, path)?;
    let (points, colors) = parse_vertices(&mut lines, &header, path)?;
    Ok(PointCloud { points, colors })
}

pub fn load_mesh_ply(path: &Path) -> Result<crate::geometry::TriangleMesh> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = parse_ply_header(&mut lines, path)?;
    let (points, colors) = parse_vertices(&mut lines, &header, path)?;
    let perr = |why: String| Error::Parse {
        what: path.display().to_string(),
        why,
    };
    let mut faces = Vec::with_capacity(header.face_count);
    for i in 0..header.face_count {
        let line = lines
            .next()
            .ok_or_else(|| perr(format!("missing face line {i}")))?;
        let vals: Vec<i64> = line
            .split_whitespace()
            .map(|t| t.parse::<i64>().map_err(|_| perr(format!("bad number in face {i}"))))
            .collect::<Result<_>>()?;
        if vals.is_empty() || vals[0] != 3 || vals.len() < 4 {
            return Err(perr(format!("face {i} is not a triangle")));
        }
        faces.push([vals[1] as u32, vals[2] as u32, vals[3] as u32]);
    }
    let n = points.len();
    let colors = colors.unwrap_or_else(|| vec![[0.7, 0.7, 0.7]; n]);
    crate::geometry::TriangleMesh::new(points, faces, colors)
}
