//! ASCII OBJ and binary little-endian PLY.
//!
//! Coordinates are stored as `f32`; reading a file and writing it again
//! reproduces it byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

fn f32s(v: Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

pub fn write_obj(mesh: &TriangleMesh, w: &mut impl Write) -> Result<()> {
    mesh.validate()?;
    for v in &mesh.vertices {
        let [x, y, z] = f32s(*v);
        writeln!(w, "v {x} {y} {z}")?;
    }
    if let Some(normals) = &mesh.normals {
        for n in normals {
            let [x, y, z] = f32s(*n);
            writeln!(w, "vn {x} {y} {z}")?;
        }
    }
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| i + 1);
        if mesh.normals.is_some() {
            writeln!(w, "f {a}//{a} {b}//{b} {c}//{c}")?;
        } else {
            writeln!(w, "f {a} {b} {c}")?;
        }
    }
    Ok(())
}

pub fn export_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_obj(mesh, &mut w)?;
    w.flush()?;
    Ok(())
}

fn parse_vec3(parts: &[&str], line: usize) -> Result<Vec3> {
    if parts.len() < 3 {
        return Err(Error::MeshFormat(format!("line {line}: expected three coordinates")));
    }
    let mut v = [0.0; 3];
    for (k, p) in parts[..3].iter().enumerate() {
        v[k] = p
            .parse::<f32>()
            .map_err(|_| Error::MeshFormat(format!("line {line}: bad number {p:?}")))? as f64;
    }
    Ok(Vec3::from(v))
}

/// Reads the `v`, `vn` and triangular `f` records of an OBJ file.
pub fn import_obj(path: &Path) -> Result<TriangleMesh> {
    let reader = BufReader::new(File::open(path)?);
    let mut mesh = TriangleMesh::default();
    let mut normals = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.first() {
            Some(&"v") => mesh.vertices.push(parse_vec3(&parts[1..], n + 1)?),
            Some(&"vn") => normals.push(parse_vec3(&parts[1..], n + 1)?),
            Some(&"f") => {
                if parts.len() != 4 {
                    return Err(Error::MeshFormat(format!("line {}: only triangles are supported", n + 1)));
                }
                let mut t = [0u32; 3];
                for (k, p) in parts[1..].iter().enumerate() {
                    let first = p.split('/').next().unwrap_or("");
                    let i: u32 = first
                        .parse()
                        .map_err(|_| Error::MeshFormat(format!("line {}: bad index {p:?}", n + 1)))?;
                    if i == 0 {
                        return Err(Error::MeshFormat(format!("line {}: indices start at 1", n + 1)));
                    }
                    t[k] = i - 1;
                }
                mesh.triangles.push(t);
            }
            _ => {}
        }
    }
    if !normals.is_empty() {
        mesh.normals = Some(normals);
    }
    mesh.validate()?;
    Ok(mesh)
}

pub fn write_ply(mesh: &TriangleMesh, w: &mut impl Write) -> Result<()> {
    mesh.validate()?;
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        mesh.vertices.len()
    );
    if mesh.normals.is_some() {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    header.push_str(&format!(
        "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.triangles.len()
    ));
    w.write_all(header.as_bytes())?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in f32s(*v) {
            w.write_all(&c.to_le_bytes())?;
        }
        if let Some(normals) = &mesh.normals {
            for c in f32s(normals[i]) {
                w.write_all(&c.to_le_bytes())?;
            }
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for &i in t {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn export_ply(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply(mesh, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads PLY files in the layout [`write_ply`] produces.
pub fn read_ply(r: &mut impl BufRead) -> Result<TriangleMesh> {
    let bad = |m: &str| Error::MeshFormat(format!("ply: {m}"));
    let mut line = String::new();
    let mut next = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::MeshFormat("ply: truncated header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next(r)? != "ply" {
        return Err(bad("missing magic"));
    }
    if next(r)? != "format binary_little_endian 1.0" {
        return Err(bad("only binary_little_endian 1.0 is supported"));
    }
    let (mut n_vert, mut n_face, mut props) = (None, None, Vec::new());
    loop {
        let l = next(r)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["comment", ..] => {}
            ["element", "vertex", n] => n_vert = Some(n.parse::<usize>().map_err(|_| bad("vertex count"))?),
            ["element", "face", n] => n_face = Some(n.parse::<usize>().map_err(|_| bad("face count"))?),
            ["property", "float", name] if n_face.is_none() => props.push(name.to_string()),
            ["property", "list", "uchar", "int", "vertex_indices"] => {}
            _ => return Err(bad(&format!("unsupported header line {l:?}"))),
        }
    }
    let (n_vert, n_face) = (n_vert.ok_or(bad("no vertex element"))?, n_face.ok_or(bad("no face element"))?);
    let with_normals = match props.join(" ").as_str() {
        "x y z" => false,
        "x y z nx ny nz" => true,
        other => return Err(bad(&format!("unsupported vertex properties {other:?}"))),
    };
    let mut f = [0u8; 4];
    let mut read_f32 = |r: &mut dyn BufRead| -> Result<f64> {
        r.read_exact(&mut f)?;
        Ok(f32::from_le_bytes(f) as f64)
    };
    let mut mesh = TriangleMesh::default();
    let mut normals = Vec::new();
    for _ in 0..n_vert {
        let v = [read_f32(r)?, read_f32(r)?, read_f32(r)?];
        mesh.vertices.push(Vec3::from(v));
        if with_normals {
            let n = [read_f32(r)?, read_f32(r)?, read_f32(r)?];
            normals.push(Vec3::from(n));
        }
    }
    for _ in 0..n_face {
        let mut count = [0u8; 1];
        r.read_exact(&mut count)?;
        if count[0] != 3 {
            return Err(bad("only triangles are supported"));
        }
        let mut t = [0u32; 3];
        for slot in &mut t {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            let i = i32::from_le_bytes(b);
            *slot = u32::try_from(i).map_err(|_| bad("negative index"))?;
        }
        mesh.triangles.push(t);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes after the last face"));
    }
    if with_normals {
        mesh.normals = Some(normals);
    }
    mesh.validate()?;
    Ok(mesh)
}

pub fn import_ply(path: &Path) -> Result<TriangleMesh> {
    read_ply(&mut BufReader::new(File::open(path)?))
}
