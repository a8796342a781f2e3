//! Triangle mesh along the cortex center.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::{vec3, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Per-vertex thickness (mm), filled by estimation or known for phantoms.
    pub thickness: Option<Vec<f64>>,
    /// Number of patches covering each vertex, filled by estimation.
    pub multiplicity: Option<Vec<u32>>,
    /// Vertices inside the analysed region.
    pub region: Vec<bool>,
}

impl SurfaceMesh {
    /// Validates and builds a mesh with every vertex in-region.
    pub fn new(vertices: Vec<Vec3>, normals: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        let mesh = Self {
            vertices,
            normals,
            triangles,
            thickness: None,
            multiplicity: None,
            region: vec![true; n],
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.normals.len() != n || self.region.len() != n {
            return Err(Error::invalid("mesh per-vertex arrays differ in length"));
        }
        if let Some(t) = &self.thickness {
            if t.len() != n {
                return Err(Error::invalid("mesh thickness length differs from vertex count"));
            }
        }
        if let Some(m) = &self.multiplicity {
            if m.len() != n {
                return Err(Error::invalid("mesh multiplicity length differs from vertex count"));
            }
        }
        for (i, nrm) in self.normals.iter().enumerate() {
            if (vec3::norm(*nrm) - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("normal of vertex {i} is not unit length")));
            }
        }
        let mut edge_use: HashMap<(usize, usize), u32> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::invalid(format!("triangle {t} references a missing vertex")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::invalid(format!("triangle {t} is degenerate")));
            }
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                let c = edge_use.entry((a.min(b), a.max(b))).or_default();
                *c += 1;
                if *c > 2 {
                    return Err(Error::invalid(format!(
                        "edge ({a}, {b}) is shared by more than two triangles"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn region_vertices(&self) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&v| self.region[v]).collect()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * vec3::norm(vec3::cross(vec3::sub(pb, pa), vec3::sub(pc, pa)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Area of triangles with all three corners in-region.
    pub fn region_area(&self) -> f64 {
        (0..self.triangles.len())
            .filter(|&t| self.triangles[t].iter().all(|&v| self.region[v]))
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Undirected edge list with Euclidean lengths, as an adjacency list.
    pub fn edge_graph(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.vertices.len()];
        for tri in &self.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                if !adj[a].iter().any(|&(x, _)| x == b) {
                    let d = vec3::dist(self.vertices[a], self.vertices[b]);
                    adj[a].push((b, d));
                    adj[b].push((a, d));
                }
            }
        }
        adj
    }

    /// Area-weighted vertex normals from the triangle orientation.
    pub fn face_normals_to_vertices(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
        let mut acc = vec![[0.0; 3]; vertices.len()];
        for tri in triangles {
            let [a, b, c] = *tri;
            let n = vec3::cross(vec3::sub(vertices[b], vertices[a]), vec3::sub(vertices[c], vertices[a]));
            for &v in tri {
                acc[v] = vec3::add(acc[v], n);
            }
        }
        acc.into_iter()
            .map(|n| {
                let l = vec3::norm(n);
                if l > 0.0 {
                    vec3::scale(n, 1.0 / l)
                } else {
                    [0.0, 0.0, 1.0]
                }
            })
            .collect()
    }
}
