//! ASCII OBJ / PLY reading and writing.
//!
//! Only triangle meshes are accepted; polygons with more than three corners
//! are rejected rather than triangulated. Coordinates are written with
//! Rust's shortest round-trip float formatting, so a save/load cycle
//! reproduces every `f64` bit for bit. Landmarks live in a sidecar file
//! next to the mesh (same stem, `.lmk` extension), one vertex index per line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::mesh::{Mesh, Vec3};
use crate::fsutil::write_atomic;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(MeshFormat::Obj),
            "ply" => Some(MeshFormat::Ply),
            _ => None,
        }
    }
}

impl FromStr for MeshFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "obj" => Ok(MeshFormat::Obj),
            "ply" => Ok(MeshFormat::Ply),
            other => Err(Error::InvalidArgument(format!("unknown mesh format '{other}'"))),
        }
    }
}

fn landmark_path(path: &Path) -> PathBuf {
    path.with_extension("lmk")
}

/// Load a mesh; picks up a `.lmk` landmark sidecar when one exists.
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<Mesh> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (vertices, faces) = match format {
        MeshFormat::Obj => parse_obj(path, &String::from_utf8_lossy(&text))?,
        MeshFormat::Ply => parse_ply(path, &text)?,
    };
    let lmk = landmark_path(path);
    let landmarks = if lmk.exists() {
        load_landmarks(&lmk)?
    } else {
        Vec::new()
    };
    Mesh::new(vertices, faces, landmarks)
}

pub fn save_mesh(mesh: &Mesh, path: &Path, format: MeshFormat) -> Result<()> {
    let text = match format {
        MeshFormat::Obj => format_obj(mesh),
        MeshFormat::Ply => format_ply(mesh),
    };
    write_atomic(path, text.as_bytes())?;
    if !mesh.landmarks().is_empty() {
        save_landmarks(mesh.landmarks(), &landmark_path(path))?;
    }
    Ok(())
}

pub fn load_landmarks(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let idx = line.parse::<usize>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg: format!("bad landmark index '{line}'"),
        })?;
        out.push(idx);
    }
    Ok(out)
}

pub fn save_landmarks(landmarks: &[usize], path: &Path) -> Result<()> {
    let mut text = String::from("# landmark vertex indices, one per line, in landmark order\n");
    for l in landmarks {
        writeln!(text, "{l}").unwrap();
    }
    write_atomic(path, text.as_bytes())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, tok: Option<&str>) -> Result<f64> {
    let tok = tok.ok_or_else(|| parse_err(path, line, "missing coordinate"))?;
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("bad number '{tok}'")))
}

fn parse_obj(path: &Path, text: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(path, line_no, toks.next())?;
                let y = parse_f64(path, line_no, toks.next())?;
                let z = parse_f64(path, line_no, toks.next())?;
                vertices.push(Vec3::new(x, y, z));
            }
            Some("f") => {
                let corners: Vec<&str> = toks.collect();
                if corners.len() != 3 {
                    return Err(parse_err(path, line_no, "non-triangular face"));
                }
                let mut face = [0usize; 3];
                for (slot, c) in face.iter_mut().zip(&corners) {
                    let head = c.split('/').next().unwrap_or("");
                    let idx: i64 = head
                        .parse()
                        .map_err(|_| parse_err(path, line_no, format!("bad face index '{c}'")))?;
                    *slot = if idx > 0 {
                        (idx - 1) as usize
                    } else if idx < 0 && (-idx) as usize <= vertices.len() {
                        vertices.len() - (-idx) as usize
                    } else {
                        return Err(parse_err(path, line_no, format!("bad face index '{c}'")));
                    };
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| parse_err(path, 1, "PLY is not ASCII (binary PLY is not supported)"))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' magic")),
    }

    let mut n_vertices = None;
    let mut n_faces = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current = "";
    let mut header_end = None;
    for (k, raw) in lines.by_ref() {
        let line_no = k + 1;
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("format") => {
                if toks.next() != Some("ascii") {
                    return Err(parse_err(
                        path,
                        line_no,
                        "binary PLY is not supported; convert to ASCII",
                    ));
                }
            }
            Some("element") => {
                let name = toks.next().unwrap_or("");
                let count: usize = toks
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(path, line_no, "bad element count"))?;
                match name {
                    "vertex" => {
                        n_vertices = Some(count);
                        current = "vertex";
                    }
                    "face" => {
                        n_faces = Some(count);
                        current = "face";
                    }
                    _ if count == 0 => current = "other",
                    _ => {
                        return Err(parse_err(
                            path,
                            line_no,
                            format!("unsupported element '{name}'"),
                        ))
                    }
                }
            }
            Some("property") if current == "vertex" => {
                let name = toks.last().unwrap_or("").to_string();
                vertex_props.push(name);
            }
            Some("end_header") => {
                header_end = Some(line_no);
                break;
            }
            _ => {}
        }
    }
    if header_end.is_none() {
        return Err(parse_err(path, 1, "missing end_header"));
    }
    let n_vertices = n_vertices.ok_or_else(|| parse_err(path, 1, "missing vertex element"))?;
    let n_faces = n_faces.unwrap_or(0);
    let pos = |name: &str| vertex_props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(parse_err(path, 1, "vertex element lacks x/y/z")),
    };

    let mut vertices = Vec::with_capacity(n_vertices);
    let mut faces = Vec::with_capacity(n_faces);
    let mut body = lines.filter(|(_, l)| !l.trim().is_empty());
    for _ in 0..n_vertices {
        let (k, l) = body
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of vertex list"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let get = |i: usize| parse_f64(path, k + 1, toks.get(i).copied());
        vertices.push(Vec3::new(get(ix)?, get(iy)?, get(iz)?));
    }
    for _ in 0..n_faces {
        let (k, l) = body
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of face list"))?;
        let toks: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, k + 1, "bad face index"))?;
        if toks.first() != Some(&3) || toks.len() != 4 {
            return Err(parse_err(path, k + 1, "non-triangular face"));
        }
        faces.push([toks[1], toks[2], toks[3]]);
    }
    Ok((vertices, faces))
}

fn format_obj(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.vertex_count() * 48);
    for v in mesh.vertices() {
        writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

fn format_ply(mesh: &Mesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", mesh.vertex_count()).unwrap();
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    writeln!(s, "element face {}", mesh.face_count()).unwrap();
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in mesh.vertices() {
        writeln!(s, "{:?} {:?} {:?}", v.x, v.y, v.z).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    s
}
