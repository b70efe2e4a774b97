//! Mesh files: PLY (ascii and binary little-endian, optional per-vertex
//! integer property "semantic", optional uchar rgb), and OBJ (geometry only).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::scalar::Real;

use super::mesh::TriMesh;
use super::vec::Vec3;
use super::GeomError;

const F: &str = "PLY mesh";

/// Binary little-endian PLY with x/y/z, optional semantic labels.
pub fn write_ply<T: Real>(path: &Path, mesh: &TriMesh<T>) -> Result<(), GeomError> {
    write_ply_impl(path, mesh, None)
}

/// As [`write_ply`] but with per-vertex uchar red/green/blue.
pub fn write_ply_colored<T: Real>(
    path: &Path,
    mesh: &TriMesh<T>,
    colors: &[[u8; 3]],
) -> Result<(), GeomError> {
    if colors.len() != mesh.vertices.len() {
        return Err(GeomError::format(F, "color count does not match vertex count"));
    }
    write_ply_impl(path, mesh, Some(colors))
}

fn write_ply_impl<T: Real>(
    path: &Path,
    mesh: &TriMesh<T>,
    colors: Option<&[[u8; 3]]>,
) -> Result<(), GeomError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "ply\nformat binary_little_endian 1.0\n")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    write!(w, "property float x\nproperty float y\nproperty float z\n")?;
    if mesh.labels.is_some() {
        writeln!(w, "property uchar semantic")?;
    }
    if colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "element face {}", mesh.faces.len())?;
    write!(w, "property list uchar int vertex_indices\nend_header\n")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in [v.x, v.y, v.z] {
            w.write_all(&(c.to_f64_lossy() as f32).to_le_bytes())?;
        }
        if let Some(l) = &mesh.labels {
            w.write_all(&[l[i]])?;
        }
        if let Some(cols) = colors {
            w.write_all(&cols[i])?;
        }
    }
    for f in &mesh.faces {
        w.write_all(&[3u8])?;
        for &vi in f {
            w.write_all(&(vi as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum ScalarType {
    F32,
    F64,
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(ScalarType::F32),
            "double" | "float64" => Some(ScalarType::F64),
            "uchar" | "uint8" => Some(ScalarType::U8),
            "char" | "int8" => Some(ScalarType::I8),
            "ushort" | "uint16" => Some(ScalarType::U16),
            "short" | "int16" => Some(ScalarType::I16),
            "uint" | "uint32" => Some(ScalarType::U32),
            "int" | "int32" => Some(ScalarType::I32),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::U8 | ScalarType::I8 => 1,
            ScalarType::U16 | ScalarType::I16 => 2,
            ScalarType::F32 | ScalarType::U32 | ScalarType::I32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

enum Property {
    Scalar { ty: ScalarType, name: String },
    List { count_ty: ScalarType, item_ty: ScalarType },
}

struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Read a PLY or OBJ mesh depending on the file extension.
pub fn read_mesh<T: Real>(path: &Path) -> Result<TriMesh<T>, GeomError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => read_obj(path),
        _ => read_ply(path),
    }
}

pub fn read_ply<T: Real>(path: &Path) -> Result<TriMesh<T>, GeomError> {
    let mut file = BufReader::new(File::open(path)?);

    let mut header = Vec::new();
    // The header is ascii lines terminated by "end_header".
    loop {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            file.read_exact(&mut byte).map_err(|_| GeomError::format(F, "truncated header"))?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        let text = String::from_utf8_lossy(&line).trim_end_matches('\r').to_string();
        let done = text.trim() == "end_header";
        header.push(text);
        if done {
            break;
        }
    }
    if header.first().map(|s| s.trim()) != Some("ply") {
        return Err(GeomError::format(F, "missing \"ply\" magic line"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in &header[1..] {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", other, _] => {
                return Err(GeomError::format(F, format!("unsupported format {other}")));
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| GeomError::format(F, format!("bad element count {count}")))?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", ct, it, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| GeomError::format(F, "property before element"))?;
                let count_ty = ScalarType::parse(ct)
                    .ok_or_else(|| GeomError::format(F, format!("unknown type {ct}")))?;
                let item_ty = ScalarType::parse(it)
                    .ok_or_else(|| GeomError::format(F, format!("unknown type {it}")))?;
                let _ = name;
                el.props.push(Property::List { count_ty, item_ty });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| GeomError::format(F, "property before element"))?;
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| GeomError::format(F, format!("unknown type {ty}")))?;
                el.props.push(Property::Scalar { ty, name: name.to_string() });
            }
            ["comment", ..] | ["end_header"] | [] => {}
            other => return Err(GeomError::format(F, format!("unrecognized header line {:?}", other))),
        }
    }
    let format = format.ok_or_else(|| GeomError::format(F, "missing format line"))?;

    let mut body = Vec::new();
    file.read_to_end(&mut body)?;

    let mut vertices = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut has_semantic = false;
    let mut faces = Vec::new();

    match format {
        PlyFormat::Ascii => {
            let text = String::from_utf8_lossy(&body);
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for el in &elements {
                for _ in 0..el.count {
                    let line = lines
                        .next()
                        .ok_or_else(|| GeomError::format(F, format!("missing {} data", el.name)))?;
                    let mut toks = line.split_whitespace();
                    let mut xyz = [0f64; 3];
                    let mut sem: Option<u8> = None;
                    for p in &el.props {
                        match p {
                            Property::Scalar { name, .. } => {
                                let tok = toks
                                    .next()
                                    .ok_or_else(|| GeomError::format(F, "short data line"))?;
                                let v: f64 = tok
                                    .parse()
                                    .map_err(|_| GeomError::format(F, format!("bad number {tok}")))?;
                                match name.as_str() {
                                    "x" => xyz[0] = v,
                                    "y" => xyz[1] = v,
                                    "z" => xyz[2] = v,
                                    "semantic" => sem = Some(v as u8),
                                    _ => {}
                                }
                            }
                            Property::List { .. } => {
                                let n: usize = toks
                                    .next()
                                    .ok_or_else(|| GeomError::format(F, "short face line"))?
                                    .parse()
                                    .map_err(|_| GeomError::format(F, "bad list count"))?;
                                let mut idx = Vec::with_capacity(n);
                                for _ in 0..n {
                                    let tok = toks
                                        .next()
                                        .ok_or_else(|| GeomError::format(F, "short face line"))?;
                                    idx.push(
                                        tok.parse::<usize>()
                                            .map_err(|_| GeomError::format(F, "bad face index"))?,
                                    );
                                }
                                push_fan(&mut faces, &idx);
                            }
                        }
                    }
                    if el.name == "vertex" {
                        vertices.push(Vec3::new(T::cst(xyz[0]), T::cst(xyz[1]), T::cst(xyz[2])));
                        if let Some(s) = sem {
                            has_semantic = true;
                            labels.push(s);
                        } else {
                            labels.push(255);
                        }
                    }
                }
            }
        }
        PlyFormat::BinaryLe => {
            let mut pos = 0usize;
            let take = |pos: &mut usize, n: usize| -> Result<&[u8], GeomError> {
                if *pos + n > body.len() {
                    return Err(GeomError::format(F, "truncated body"));
                }
                let s = &body[*pos..*pos + n];
                *pos += n;
                Ok(s)
            };
            for el in &elements {
                for _ in 0..el.count {
                    let mut xyz = [0f64; 3];
                    let mut sem: Option<u8> = None;
                    for p in &el.props {
                        match p {
                            Property::Scalar { ty, name } => {
                                let raw = take(&mut pos, ty.size())?;
                                let v = read_scalar(*ty, raw);
                                match name.as_str() {
                                    "x" => xyz[0] = v,
                                    "y" => xyz[1] = v,
                                    "z" => xyz[2] = v,
                                    "semantic" => sem = Some(v as u8),
                                    _ => {}
                                }
                            }
                            Property::List { count_ty, item_ty } => {
                                let raw = take(&mut pos, count_ty.size())?;
                                let n = read_scalar(*count_ty, raw) as usize;
                                let mut idx = Vec::with_capacity(n);
                                for _ in 0..n {
                                    let raw = take(&mut pos, item_ty.size())?;
                                    idx.push(read_scalar(*item_ty, raw) as usize);
                                }
                                push_fan(&mut faces, &idx);
                            }
                        }
                    }
                    if el.name == "vertex" {
                        vertices.push(Vec3::new(T::cst(xyz[0]), T::cst(xyz[1]), T::cst(xyz[2])));
                        if let Some(s) = sem {
                            has_semantic = true;
                            labels.push(s);
                        } else {
                            labels.push(255);
                        }
                    }
                }
            }
            if pos != body.len() {
                return Err(GeomError::format(
                    F,
                    format!("{} trailing bytes after declared elements", body.len() - pos),
                ));
            }
        }
    }

    TriMesh::new(vertices, faces, has_semantic.then_some(labels))
}

fn read_scalar(ty: ScalarType, raw: &[u8]) -> f64 {
    match ty {
        ScalarType::F32 => f32::from_le_bytes(raw.try_into().unwrap()) as f64,
        ScalarType::F64 => f64::from_le_bytes(raw.try_into().unwrap()),
        ScalarType::U8 => raw[0] as f64,
        ScalarType::I8 => raw[0] as i8 as f64,
        ScalarType::U16 => u16::from_le_bytes(raw.try_into().unwrap()) as f64,
        ScalarType::I16 => i16::from_le_bytes(raw.try_into().unwrap()) as f64,
        ScalarType::U32 => u32::from_le_bytes(raw.try_into().unwrap()) as f64,
        ScalarType::I32 => i32::from_le_bytes(raw.try_into().unwrap()) as f64,
    }
}

fn push_fan(faces: &mut Vec<[usize; 3]>, idx: &[usize]) {
    for i in 1..idx.len().saturating_sub(1) {
        faces.push([idx[0], idx[i], idx[i + 1]]);
    }
}

/// OBJ geometry (v/f lines); semantics are not representable in OBJ.
pub fn read_obj<T: Real>(path: &Path) -> Result<TriMesh<T>, GeomError> {
    const FO: &str = "OBJ mesh";
    let file = BufReader::new(File::open(path)?);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for line in file.lines() {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["v", x, y, z, ..] => {
                let parse = |s: &str| -> Result<f64, GeomError> {
                    s.parse().map_err(|_| GeomError::format(FO, format!("bad coordinate {s}")))
                };
                vertices.push(Vec3::new(T::cst(parse(x)?), T::cst(parse(y)?), T::cst(parse(z)?)));
            }
            ["f", rest @ ..] => {
                let mut idx = Vec::with_capacity(rest.len());
                for tok in rest {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| GeomError::format(FO, format!("bad face index {tok}")))?;
                    let resolved = if i < 0 {
                        (vertices.len() as i64 + i) as usize
                    } else {
                        (i - 1) as usize
                    };
                    idx.push(resolved);
                }
                push_fan(&mut faces, &idx);
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled_mesh() -> TriMesh<f64> {
        TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.5),
                Vec3::new(1.0, 1.0, -0.25),
            ],
            vec![[0, 1, 2], [1, 3, 2]],
            Some(vec![2, 2, 1, 1]),
        )
        .unwrap()
    }

    #[test]
    fn binary_roundtrip_keeps_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let mesh = labeled_mesh();
        write_ply(&path, &mesh).unwrap();
        let back: TriMesh<f64> = read_ply(&path).unwrap();
        assert_eq!(back.vertices.len(), 4);
        assert_eq!(back.faces, mesh.faces);
        assert_eq!(back.labels, mesh.labels);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            assert!((*a - *b).norm() < 1e-6);
        }
    }

    #[test]
    fn ascii_ply_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 3\n\
             property float x\nproperty float y\nproperty float z\nproperty uchar semantic\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n\
             0 0 0 5\n1 0 0 5\n0 1 0 7\n3 0 1 2\n",
        )
        .unwrap();
        let mesh: TriMesh<f64> = read_ply(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 3);
        assert_eq!(mesh.labels, Some(vec![5, 5, 7]));
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn obj_parses_without_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n").unwrap();
        let mesh: TriMesh<f64> = read_obj(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        assert_eq!(mesh.faces.len(), 2);
        assert!(mesh.labels.is_none());
    }

    #[test]
    fn quad_faces_triangulate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 4\n\
             property float x\nproperty float y\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n\
             0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n",
        )
        .unwrap();
        let mesh: TriMesh<f64> = read_ply(&path).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        std::fs::write(&path, "plx\nformat ascii 1.0\nend_header\n").unwrap();
        let err = read_ply::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("PLY"), "{err}");
    }
}
