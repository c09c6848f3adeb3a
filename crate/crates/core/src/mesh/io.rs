//! ASCII OBJ / PLY mesh files and plain-text contour files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use super::{Contour, Point, TriangleMesh};
use crate::error::{Error, Result};

enum Format {
    Obj,
    Ply,
}

fn format_of(path: &Path) -> Result<Format> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("obj") => Ok(Format::Obj),
        Some("ply") => Ok(Format::Ply),
        other => Err(Error::Format(format!(
            "{} (extension {:?}); expected .obj or .ply",
            path.display(),
            other.unwrap_or("")
        ))),
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let format = format_of(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Obj => parse_obj(&text, path),
        Format::Ply => parse_ply(&text, path),
    }
}

pub fn save_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format_of(path)? {
        Format::Obj => write_obj(mesh),
        Format::Ply => write_ply(mesh),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_coords<'a>(
    mut it: impl Iterator<Item = &'a str>,
    path: &Path,
    line: usize,
) -> Result<Point> {
    let mut p = [0.0; 3];
    for c in p.iter_mut() {
        let tok = it
            .next()
            .ok_or_else(|| parse_err(path, line, "expected three coordinates"))?;
        *c = tok
            .parse()
            .map_err(|_| parse_err(path, line, format!("invalid number {tok:?}")))?;
    }
    Ok(Point::new(p[0], p[1], p[2]))
}

fn parse_obj(text: &str, path: &Path) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();
    let mut ignored = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("v") => vertices.push(parse_coords(tokens, path, line)?),
            Some("f") => {
                let idx: Vec<&str> = tokens.collect();
                if idx.len() != 3 {
                    return Err(parse_err(
                        path,
                        line,
                        format!("expected a triangle, got {} indices", idx.len()),
                    ));
                }
                let mut f = [0usize; 3];
                for (k, tok) in idx.iter().enumerate() {
                    // accept `i`, `i/t`, `i/t/n` and `i//n`
                    let vi = tok.split('/').next().unwrap_or("");
                    let i: i64 = vi
                        .parse()
                        .map_err(|_| parse_err(path, line, format!("invalid index {tok:?}")))?;
                    if i < 1 {
                        return Err(parse_err(
                            path,
                            line,
                            format!("face index {i} out of range (indices are 1-based)"),
                        ));
                    }
                    f[k] = (i - 1) as usize;
                }
                faces.push(f);
                face_lines.push(line);
            }
            _ => ignored += 1,
        }
    }
    if ignored > 0 {
        warn!("{}: ignored {ignored} unsupported OBJ lines", path.display());
    }
    for (f, &line) in faces.iter().zip(&face_lines) {
        if let Some(&bad) = f.iter().find(|&&v| v >= vertices.len()) {
            return Err(parse_err(
                path,
                line,
                format!(
                    "face index {} out of range ({} vertices)",
                    bad + 1,
                    vertices.len()
                ),
            ));
        }
    }
    TriangleMesh::new(vertices, faces)
}

fn parse_ply(text: &str, path: &Path) -> Result<TriangleMesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut header_end = 0;
    for (line, l) in lines.by_ref() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", ..] => {}
            ["format", other, ..] => {
                return Err(Error::Format(format!(
                    "{}: PLY format {other} not supported, only ascii",
                    path.display()
                )))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| parse_err(path, line, "invalid element count"))?;
                current = name.to_string();
                match *name {
                    "vertex" => n_vertices = Some(count),
                    "face" => n_faces = Some(count),
                    _ if count == 0 => {}
                    _ => {
                        return Err(parse_err(
                            path,
                            line,
                            format!("unsupported element {name:?}"),
                        ))
                    }
                }
            }
            ["property", "list", ..] => {
                if current != "face" {
                    return Err(parse_err(path, line, "list property outside face element"));
                }
            }
            ["property", _ty, name] => {
                if current == "vertex" {
                    vertex_props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_end = line;
                break;
            }
            [] => {}
            _ => return Err(parse_err(path, line, format!("unexpected header line {l:?}"))),
        }
    }
    if header_end == 0 {
        return Err(parse_err(path, 1, "missing end_header"));
    }
    let pos = |name: &str| vertex_props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(path, header_end, "vertex element lacks x/y/z")),
    };
    let n_vertices = n_vertices.unwrap_or(0);
    let n_faces = n_faces.unwrap_or(0);

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (line, l) = body
            .next()
            .ok_or_else(|| parse_err(path, header_end, "unexpected end of vertex data"))?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, line, "invalid vertex value"))?;
        if vals.len() < vertex_props.len() {
            return Err(parse_err(path, line, "too few vertex properties"));
        }
        vertices.push(Point::new(vals[ix], vals[iy], vals[iz]));
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (line, l) = body
            .next()
            .ok_or_else(|| parse_err(path, header_end, "unexpected end of face data"))?;
        let vals: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, line, "invalid face index"))?;
        if vals.len() != 4 || vals[0] != 3 {
            return Err(parse_err(path, line, "only triangular faces are supported"));
        }
        let f = [vals[1], vals[2], vals[3]];
        if let Some(&bad) = f.iter().find(|&&v| v >= n_vertices) {
            return Err(parse_err(
                path,
                line,
                format!("face index {bad} out of range ({n_vertices} vertices)"),
            ));
        }
        faces.push(f);
    }
    if let Some((line, _)) = body.next() {
        return Err(parse_err(path, line, "trailing data after faces"));
    }
    TriangleMesh::new(vertices, faces)
}

// `{}` on f64 prints the shortest representation that parses back exactly.
fn write_obj(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

fn write_ply(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ply\nformat ascii 1.0");
    let _ = writeln!(s, "element vertex {}", mesh.num_vertices());
    let _ = writeln!(s, "property double x\nproperty double y\nproperty double z");
    let _ = writeln!(s, "element face {}", mesh.num_faces());
    let _ = writeln!(s, "property list uchar int vertex_indices\nend_header");
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

/// Reads a closed contour: one `x y z` line per point, in loop order.
pub fn load_contour(path: impl AsRef<Path>) -> Result<Contour> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points = read_points(&text, path)?;
    Contour::new(points, true)
}

pub fn save_contour(contour: &Contour, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_points(contour.points())).map_err(|e| Error::io(path, e))
}

/// Reads a `.particles` file: one `x y z` line per particle.
pub fn load_particles(path: impl AsRef<Path>) -> Result<Vec<Point>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_points(&text, path)
}

pub fn save_particles(points: &[Point], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_points(points)).map_err(|e| Error::io(path, e))
}

/// Parses whitespace-separated `x y z` lines. Blank lines and `#` comments are skipped.
pub(crate) fn read_points(text: &str, path: &Path) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks = content.split_whitespace();
        let p = parse_coords(&mut toks, path, idx + 1)?;
        if toks.next().is_some() {
            return Err(parse_err(path, idx + 1, "expected exactly three values"));
        }
        points.push(p);
    }
    Ok(points)
}

pub(crate) fn write_points(points: &[Point]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}
