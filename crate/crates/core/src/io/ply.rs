//! ASCII PLY meshes with per-vertex scalar fields.
//!
//! Recognised vertex properties: `x y z` (required), `nx ny nz`,
//! `thickness` (mm), `patch_multiplicity`, and `region` (0/1). Unknown
//! properties are skipped on read. Missing normals are derived from the
//! face winding.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::SurfaceMesh;
use crate::vec3;

struct Element {
    name: String,
    count: usize,
    props: Vec<Prop>,
}

enum Prop {
    Scalar(String),
    List(String),
}

pub fn read_ply(path: &Path) -> Result<SurfaceMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text).map_err(|(field, msg)| Error::format(path, field, msg))
}

type ParseResult<T> = std::result::Result<T, (String, String)>;

fn perr<T>(field: &str, msg: impl Into<String>) -> ParseResult<T> {
    Err((field.to_string(), msg.into()))
}

pub fn parse_ply(text: &str) -> ParseResult<SurfaceMesh> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return perr("header", "missing 'ply' magic");
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let Some(line) = lines.next() else {
            return perr("header", "missing end_header");
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return perr("format", format!("only ascii supported, got '{other}'")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| ("element".to_string(), format!("bad count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => match elements.last_mut() {
                Some(e) => e.props.push(Prop::List(name.to_string())),
                None => return perr("property", "property before element"),
            },
            ["property", _, name] => match elements.last_mut() {
                Some(e) => e.props.push(Prop::Scalar(name.to_string())),
                None => return perr("property", "property before element"),
            },
            ["end_header"] => break,
            _ => return perr("header", format!("unrecognised line '{line}'")),
        }
    }

    let mut vertices = Vec::new();
    let mut normals: Vec<[f64; 3]> = Vec::new();
    let mut thickness = Vec::new();
    let mut multiplicity = Vec::new();
    let mut region = Vec::new();
    let mut triangles = Vec::new();
    let mut has = (false, false, false, false);

    let mut body = lines.filter(|l| !l.trim().is_empty());
    for el in &elements {
        for row in 0..el.count {
            let Some(line) = body.next() else {
                return perr(&el.name, format!("expected {} rows, file ended at {row}", el.count));
            };
            let mut tok = line.split_whitespace();
            let mut next_num = |name: &str| -> ParseResult<f64> {
                tok.next()
                    .ok_or_else(|| (name.to_string(), format!("{} row {row}: missing value", el.name)))?
                    .parse::<f64>()
                    .map_err(|_| (name.to_string(), format!("{} row {row}: not a number", el.name)))
            };
            if el.name == "vertex" {
                let mut p = [0.0; 3];
                let mut n = [0.0; 3];
                let mut got = [false; 3];
                for prop in &el.props {
                    match prop {
                        Prop::Scalar(name) => {
                            let v = next_num(name)?;
                            match name.as_str() {
                                "x" => (p[0], got[0]) = (v, true),
                                "y" => (p[1], got[1]) = (v, true),
                                "z" => (p[2], got[2]) = (v, true),
                                "nx" => (n[0], has.0) = (v, true),
                                "ny" => n[1] = v,
                                "nz" => n[2] = v,
                                "thickness" => {
                                    has.1 = true;
                                    thickness.push(v);
                                }
                                "patch_multiplicity" => {
                                    has.2 = true;
                                    multiplicity.push(v as u32);
                                }
                                "region" => {
                                    has.3 = true;
                                    region.push(v != 0.0);
                                }
                                _ => {}
                            }
                        }
                        Prop::List(name) => {
                            let k = next_num(name)? as usize;
                            for _ in 0..k {
                                next_num(name)?;
                            }
                        }
                    }
                }
                if got != [true; 3] {
                    return perr("vertex", "x, y and z properties are required");
                }
                vertices.push(p);
                normals.push(n);
            } else if el.name == "face" {
                for prop in &el.props {
                    match prop {
                        Prop::List(name) if name == "vertex_indices" || name == "vertex_index" => {
                            let k = next_num(name)? as usize;
                            let idx = (0..k)
                                .map(|_| next_num(name).map(|v| v as usize))
                                .collect::<ParseResult<Vec<_>>>()?;
                            if k < 3 {
                                return perr(name, format!("face row {row}: fewer than 3 vertices"));
                            }
                            // fan-triangulate polygons
                            for i in 1..k - 1 {
                                triangles.push([idx[0], idx[i], idx[i + 1]]);
                            }
                        }
                        Prop::List(name) => {
                            let k = next_num(name)? as usize;
                            for _ in 0..k {
                                next_num(name)?;
                            }
                        }
                        Prop::Scalar(name) => {
                            next_num(name)?;
                        }
                    }
                }
            }
        }
    }

    let n = vertices.len();
    if triangles.iter().flatten().any(|&v| v >= n) {
        return perr("vertex_indices", "face references a missing vertex");
    }
    let normals = if has.0 {
        normals
            .into_iter()
            .enumerate()
            .map(|(i, nrm)| {
                let l = vec3::norm(nrm);
                if l > 0.0 && l.is_finite() {
                    Ok(vec3::scale(nrm, 1.0 / l))
                } else {
                    perr("nx", format!("vertex {i} has a zero normal"))
                }
            })
            .collect::<ParseResult<Vec<_>>>()?
    } else {
        SurfaceMesh::face_normals_to_vertices(&vertices, &triangles)
    };
    let mesh = SurfaceMesh {
        vertices,
        normals,
        triangles,
        thickness: has.1.then_some(thickness),
        multiplicity: has.2.then_some(multiplicity),
        region: if has.3 { region } else { vec![true; n] },
    };
    mesh.validate().map_err(|e| ("mesh".to_string(), e.to_string()))?;
    Ok(mesh)
}

pub fn encode_ply(mesh: &SurfaceMesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    if mesh.thickness.is_some() {
        s.push_str("property float thickness\n");
    }
    if mesh.multiplicity.is_some() {
        s.push_str("property int patch_multiplicity\n");
    }
    s.push_str("property uchar region\n");
    let _ = writeln!(s, "element face {}", mesh.triangles.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, (p, n)) in mesh.vertices.iter().zip(&mesh.normals).enumerate() {
        let _ = write!(
            s,
            "{} {} {} {} {} {}",
            p[0] as f32, p[1] as f32, p[2] as f32, n[0] as f32, n[1] as f32, n[2] as f32
        );
        if let Some(t) = &mesh.thickness {
            let _ = write!(s, " {}", t[i] as f32);
        }
        if let Some(m) = &mesh.multiplicity {
            let _ = write!(s, " {}", m[i]);
        }
        let _ = writeln!(s, " {}", u8::from(mesh.region[i]));
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn write_ply(mesh: &SurfaceMesh, path: &Path) -> Result<()> {
    super::write_atomic(path, encode_ply(mesh).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_fields() {
        let mut m = SurfaceMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.5]],
            vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.6, 0.8]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        m.thickness = Some(vec![0.25, 0.3, 0.125]);
        m.multiplicity = Some(vec![1, 2, 3]);
        m.region = vec![true, false, true];
        let back = parse_ply(&encode_ply(&m)).unwrap();
        assert_eq!(back.triangles, m.triangles);
        assert_eq!(back.region, m.region);
        assert_eq!(back.multiplicity, m.multiplicity);
        for (a, b) in back.thickness.unwrap().iter().zip(m.thickness.unwrap()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_normals_come_from_faces() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n\
                    element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let m = parse_ply(text).unwrap();
        assert!((m.normals[0][2] - 1.0).abs() < 1e-12);
        assert!(m.region.iter().all(|&r| r));
    }

    #[test]
    fn quads_are_split() {
        let text = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n\
                    element face 1\nproperty list uchar int vertex_index\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        assert_eq!(parse_ply(text).unwrap().triangles.len(), 2);
    }

    #[test]
    fn binary_is_rejected() {
        let err = parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").unwrap_err();
        assert_eq!(err.0, "format");
    }
}
