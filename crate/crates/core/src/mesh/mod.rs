//! Triangle meshes, their file formats and basic geometric quantities.

mod io;

use std::collections::HashMap;

pub use io::{load_mesh, parse_obj, parse_off, save_off, write_off};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// Relative area threshold below which a face counts as degenerate.
pub const DEGENERATE_AREA_RATIO: f64 = 1e-12;

/// An immutable, validated triangle mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    name: String,
}

impl TriangleMesh {
    /// Builds a mesh after checking every structural invariant.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            name: name.into(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if n < 3 {
            return Err(Error::InvalidMesh(format!("{n} vertices, need at least 3")));
        }
        if self.faces.is_empty() {
            return Err(Error::InvalidMesh("no faces".into()));
        }
        if let Some((i, _)) = self
            .vertices
            .iter()
            .enumerate()
            .find(|(_, p)| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        let mut referenced = vec![false; n];
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(Error::InvalidMesh(format!(
                        "face {fi} references vertex {v}, mesh has {n} vertices"
                    )));
                }
                referenced[v] = true;
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} repeats a vertex index {f:?}"
                )));
            }
        }
        if let Some(v) = referenced.iter().position(|r| !r) {
            return Err(Error::InvalidMesh(format!(
                "vertex {v} is not referenced by any face"
            )));
        }
        let diag = self.bounding_box_diagonal();
        let min_area = DEGENERATE_AREA_RATIO * diag * diag;
        for fi in 0..self.faces.len() {
            let a = self.face_area(fi);
            if !(a > min_area) {
                return Err(Error::DegenerateFace {
                    face: fi,
                    msg: format!("area {a:e} below {min_area:e}"),
                });
            }
        }
        let over = self.non_manifold_edge_count();
        if over > 0 {
            log::warn!("mesh '{}' has {over} non-manifold edges", self.name);
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Dimension(format!(
                "{} positions for a {}-vertex mesh",
                vertices.len(),
                self.vertices.len()
            )));
        }
        Self::new(vertices, self.faces.clone(), self.name.clone())
    }

    pub fn face_corners(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_corners(f);
        geom::triangle_area(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        geom::dist(lo, hi)
    }

    /// Barycentric lumped vertex areas: a third of every incident face area.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let third = self.face_area(fi) / 3.0;
            for &v in f {
                areas[v] += third;
            }
        }
        areas
    }

    /// Uniformly rescales positions so the total surface area is 1.
    pub fn normalize_to_unit_area(&self) -> Result<Self> {
        let area = self.total_area();
        if !(area > 0.0) || !area.is_finite() {
            return Err(Error::InvalidMesh(format!("cannot normalize area {area}")));
        }
        let s = 1.0 / area.sqrt();
        let vertices = self.vertices.iter().map(|&p| geom::scale(p, s)).collect();
        self.with_vertices(vertices)
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![[0.0; 3]; self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = [
                self.vertices[f[0]],
                self.vertices[f[1]],
                self.vertices[f[2]],
            ];
            let n = geom::cross(geom::sub(b, a), geom::sub(c, a));
            for &v in f {
                normals[v] = geom::add(normals[v], n);
            }
        }
        normals.into_iter().map(geom::normalized).collect()
    }

    /// Number of faces incident to each undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *counts.entry(edge_key(f[k], f[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        counts
    }

    fn non_manifold_edge_count(&self) -> usize {
        self.edge_face_counts().values().filter(|&&c| c > 2).count()
    }

    /// Vertices lying on an edge with a single incident face.
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut on_boundary = vec![false; self.vertices.len()];
        for ((a, b), c) in self.edge_face_counts() {
            if c == 1 {
                on_boundary[a] = true;
                on_boundary[b] = true;
            }
        }
        on_boundary
    }

    pub fn is_closed(&self) -> bool {
        self.edge_face_counts().values().all(|&c| c == 2)
    }

    /// Undirected edge graph with Euclidean edge lengths.
    pub fn edge_graph(&self) -> EdgeGraph {
        let n = self.vertices.len();
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut edges: Vec<(usize, usize)> = self.edge_face_counts().into_keys().collect();
        edges.sort_unstable();
        for (a, b) in edges {
            let len = geom::dist(self.vertices[a], self.vertices[b]);
            adjacency[a].push((b, len));
            adjacency[b].push((a, len));
        }
        EdgeGraph { adjacency }
    }
}

#[inline]
pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Symmetric per-vertex adjacency with positive edge lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl EdgeGraph {
    pub fn n_vertices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// `(neighbor, length)` pairs of `v`, sorted by neighbor index.
    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adjacency[v]
    }
}
