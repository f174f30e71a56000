//! ASCII OFF / OBJ reading and OFF writing.

use std::fmt::Write as _;
use std::path::Path;

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Loads an `.off` or `.obj` file; the mesh is named after the file stem.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "off" => parse_off(&text, &name),
        "obj" => parse_obj(&text, &name),
        other => Err(Error::InvalidArgument(format!(
            "unsupported mesh format '.{other}' for {}",
            path.display()
        ))),
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| parse_err(line, format!("bad {what} '{tok}'")))
}

/// Parses ASCII OFF. Comment lines (`#`) and blank lines are skipped.
pub fn parse_off(text: &str, name: &str) -> Result<TriangleMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let rest_of_header = header
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(hline, "missing OFF header"))?
        .trim();
    let (cline, counts) = if rest_of_header.is_empty() {
        lines
            .next()
            .ok_or_else(|| parse_err(hline, "missing counts line"))?
    } else {
        (hline, rest_of_header)
    };
    let mut tok = counts.split_whitespace();
    let nv: usize = parse_num(tok.next(), cline, "vertex count")?;
    let nf: usize = parse_num(tok.next(), cline, "face count")?;

    let mut vertices: Vec<Vec3> = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(cline, "unexpected end of vertex list"))?;
        let mut t = l.split_whitespace();
        let x = parse_num(t.next(), ln, "x")?;
        let y = parse_num(t.next(), ln, "y")?;
        let z = parse_num(t.next(), ln, "z")?;
        vertices.push([x, y, z]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(cline, "unexpected end of face list"))?;
        let mut t = l.split_whitespace();
        let k: usize = parse_num(t.next(), ln, "face arity")?;
        if k != 3 {
            return Err(parse_err(
                ln,
                format!("only triangles supported, got {k}-gon"),
            ));
        }
        let a = parse_num(t.next(), ln, "face index")?;
        let b = parse_num(t.next(), ln, "face index")?;
        let c = parse_num(t.next(), ln, "face index")?;
        faces.push([a, b, c]);
    }
    TriangleMesh::new(vertices, faces, name)
}

/// Parses ASCII OBJ `v` / `f` records with 1-based (or negative relative) indices.
///
/// Other record types are ignored; polygons are fan-triangulated.
pub fn parse_obj(text: &str, name: &str) -> Result<TriangleMesh> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut t = line.split_whitespace();
        match t.next() {
            Some("v") => {
                let x = parse_num(t.next(), ln, "x")?;
                let y = parse_num(t.next(), ln, "y")?;
                let z = parse_num(t.next(), ln, "z")?;
                vertices.push([x, y, z]);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for item in t {
                    let first = item.split('/').next().unwrap_or("");
                    let v: i64 = first
                        .parse()
                        .map_err(|_| parse_err(ln, format!("bad face index '{item}'")))?;
                    let resolved = if v > 0 {
                        v - 1
                    } else if v < 0 {
                        vertices.len() as i64 + v
                    } else {
                        return Err(parse_err(ln, "face index 0 is invalid in OBJ"));
                    };
                    if resolved < 0 {
                        return Err(parse_err(ln, format!("face index {v} out of range")));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(parse_err(ln, "face with fewer than 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces, name)
}

/// Serializes to ASCII OFF using shortest round-trip float formatting.
pub fn write_off(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    s.push_str("OFF\n");
    let _ = writeln!(s, "{} {} 0", mesh.n_vertices(), mesh.n_faces());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn save_off(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::fsutil::write_atomic(path, write_off(mesh).as_bytes())
}
