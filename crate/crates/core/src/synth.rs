//! Synthetic deformable shape pairs with ground truth, dataset manifests and the
//! on-disk operator / basis cache.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::geom::{self, Vec3};
use crate::matching::PointMap;
use crate::mesh::{self, TriangleMesh};
use crate::operators::{cotangent_stiffness, Operators};
use crate::rng::substream;
use crate::spectral::{eigenbasis, SpectralBasis};

/// Template generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateKind {
    /// Unit-radius subdivided icosahedron (closed).
    Icosphere { subdivisions: u32 },
    /// Open unit-radius tube with `rings` bands of `segments` quads.
    Cylinder { rings: u32, segments: u32 },
    /// Flat 4×1 strip with `resolution` quads per unit length.
    Bar { resolution: u32 },
}

/// Largest vertex count a template may have.
pub const MAX_TEMPLATE_VERTICES: usize = 10_000;

impl TemplateKind {
    pub fn vertex_count(&self) -> usize {
        match *self {
            TemplateKind::Icosphere { subdivisions } => 10 * 4usize.pow(subdivisions) + 2,
            TemplateKind::Cylinder { rings, segments } => ((rings + 1) * segments) as usize,
            TemplateKind::Bar { resolution } => ((4 * resolution + 1) * (resolution + 1)) as usize,
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateKind::Icosphere { subdivisions } => write!(f, "icosphere({subdivisions})"),
            TemplateKind::Cylinder { rings, segments } => write!(f, "cylinder({rings},{segments})"),
            TemplateKind::Bar { resolution } => write!(f, "bar({resolution})"),
        }
    }
}

impl FromStr for TemplateKind {
    type Err = Error;

    /// Parses `icosphere(3)`, `cylinder(8,16)` or `bar(4)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad template '{s}'"));
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args: Vec<u32> = inner
            .split(',')
            .map(|a| a.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (&s[..open], args.as_slice()) {
            ("icosphere", [d]) => Ok(TemplateKind::Icosphere { subdivisions: *d }),
            ("cylinder", [r, c]) => Ok(TemplateKind::Cylinder {
                rings: *r,
                segments: *c,
            }),
            ("bar", [r]) => Ok(TemplateKind::Bar { resolution: *r }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for TemplateKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TemplateKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn generate_template(kind: &TemplateKind) -> Result<TriangleMesh> {
    let n = kind.vertex_count();
    if n > MAX_TEMPLATE_VERTICES {
        return Err(Error::InvalidArgument(format!(
            "{kind} has {n} vertices, limit is {MAX_TEMPLATE_VERTICES}"
        )));
    }
    let (vertices, faces) = match *kind {
        TemplateKind::Icosphere { subdivisions } => icosphere(subdivisions),
        TemplateKind::Cylinder { rings, segments } => {
            if rings < 1 || segments < 3 {
                return Err(Error::InvalidArgument(format!(
                    "{kind}: need rings >= 1, segments >= 3"
                )));
            }
            cylinder(rings as usize, segments as usize)
        }
        TemplateKind::Bar { resolution } => {
            if resolution < 1 {
                return Err(Error::InvalidArgument(format!(
                    "{kind}: resolution must be >= 1"
                )));
            }
            bar(resolution as usize)
        }
    };
    TriangleMesh::new(vertices, faces, kind.to_string())
}

fn icosphere(subdivisions: u32) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(geom::normalized)
    .collect();
    let mut faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            *midpoint.entry(mesh::edge_key(a, b)).or_insert_with(|| {
                let m = geom::normalized(geom::scale(geom::add(vertices[a], vertices[b]), 0.5));
                vertices.push(m);
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (vertices, faces)
}

fn cylinder(rings: usize, segments: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let h = 2.0 * std::f64::consts::PI / segments as f64;
    let mut vertices = Vec::with_capacity((rings + 1) * segments);
    for r in 0..=rings {
        for s in 0..segments {
            let a = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push([a.cos(), a.sin(), r as f64 * h]);
        }
    }
    let idx = |r: usize, s: usize| r * segments + s % segments;
    let mut faces = Vec::with_capacity(2 * rings * segments);
    for r in 0..rings {
        for s in 0..segments {
            let (a, b, c, d) = (idx(r, s), idx(r, s + 1), idx(r + 1, s + 1), idx(r + 1, s));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    (vertices, faces)
}

fn bar(res: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let (nx, ny) = (4 * res + 1, res + 1);
    let step = 1.0 / res as f64;
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            vertices.push([i as f64 * step, j as f64 * step, 0.0]);
        }
    }
    let idx = |i: usize, j: usize| j * nx + i;
    let mut faces = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    (vertices, faces)
}

/// Retries allowed when a deformation degenerates a face.
pub const DEFORM_RETRIES: usize = 5;
/// Amplitude of the global bend relative to the normal field.
pub const BEND_AMPLITUDE: f64 = 0.5;
const SPECTRAL_MODES: std::ops::RangeInclusive<usize> = 1..=8;

/// Smoothly deforms `mesh`: a random combination of eigenfunctions 1..=8 (scaled to
/// unit max-magnitude) along vertex normals, plus a parabolic bend across the
/// longest bounding-box axis. Both are scaled by `magnitude` times the
/// bounding-box diagonal.
///
/// A deformation that flips or collapses a face is retried at half the magnitude,
/// at most [`DEFORM_RETRIES`] times.
pub fn deform(
    mesh: &TriangleMesh,
    basis: &SpectralBasis,
    seed: u64,
    magnitude: f64,
) -> Result<TriangleMesh> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "magnitude {magnitude} must be >= 0"
        )));
    }
    if basis.n() != mesh.n_vertices() {
        return Err(Error::Dimension(format!(
            "basis for {} vertices on a {}-vertex mesh",
            basis.n(),
            mesh.n_vertices()
        )));
    }
    if magnitude == 0.0 {
        return Ok(mesh.clone());
    }
    let field = displacement_field(mesh, basis, seed)?;
    let diag = mesh.bounding_box_diagonal();
    let mut scale = magnitude;
    for _attempt in 0..=DEFORM_RETRIES {
        let vertices: Vec<Vec3> = mesh
            .vertices()
            .iter()
            .zip(&field)
            .map(|(&p, &d)| geom::add(p, geom::scale(d, scale * diag)))
            .collect();
        if let Ok(out) = mesh.with_vertices(vertices) {
            if preserves_orientation(mesh, &out) && cotangent_stiffness(&out).is_ok() {
                return Ok(out);
            }
        }
        scale *= 0.5;
    }
    Err(Error::Numerical(format!(
        "deformation of {} stayed degenerate after {DEFORM_RETRIES} retries",
        mesh.name()
    )))
}

/// Unscaled per-vertex displacement; its norm is at most `1 + BEND_AMPLITUDE`.
fn displacement_field(mesh: &TriangleMesh, basis: &SpectralBasis, seed: u64) -> Result<Vec<Vec3>> {
    let modes: Vec<usize> = SPECTRAL_MODES.filter(|&i| i < basis.k()).collect();
    if modes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "deformation needs at least 2 eigenfunctions, basis has {}",
            basis.k()
        )));
    }
    let mut rng = substream(seed, "deform");
    let coef: Vec<f64> = modes
        .iter()
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let bend: f64 = rng.random_range(-BEND_AMPLITUDE..BEND_AMPLITUDE);

    let n = mesh.n_vertices();
    let mut f = vec![0.0; n];
    for (c, &i) in coef.iter().zip(&modes) {
        for (v, fv) in f.iter_mut().enumerate() {
            *fv += c * basis.phi()[(v, i)];
        }
    }
    let peak = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        f.iter_mut().for_each(|x| *x /= peak);
    }

    let (lo, hi) = mesh.bounding_box();
    let ext: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
    let long = (0..3).fold(0, |b, a| if ext[a] > ext[b] { a } else { b });
    let thin = (0..3)
        .filter(|&a| a != long)
        .fold(None, |b: Option<usize>, a| match b {
            Some(b) if ext[b] <= ext[a] => Some(b),
            _ => Some(a),
        })
        .unwrap();
    let mid = 0.5 * (lo[long] + hi[long]);
    let half = 0.5 * ext[long];

    let normals = mesh.vertex_normals();
    Ok((0..n)
        .map(|v| {
            let s = (mesh.vertices()[v][long] - mid) / half;
            let mut d = geom::scale(normals[v], f[v]);
            d[thin] += bend * s * s;
            d
        })
        .collect())
}

fn preserves_orientation(before: &TriangleMesh, after: &TriangleMesh) -> bool {
    (0..before.n_faces()).all(|fi| {
        let n0 = face_normal(before.face_corners(fi));
        let n1 = face_normal(after.face_corners(fi));
        geom::dot(n0, n1) > 0.0
    })
}

fn face_normal(p: [Vec3; 3]) -> Vec3 {
    geom::cross(geom::sub(p[1], p[0]), geom::sub(p[2], p[0]))
}

/// Fraction of edges whose length ratio between two same-connectivity meshes lies
/// within `1 ± tol`.
pub fn edge_ratio_fraction(a: &TriangleMesh, b: &TriangleMesh, tol: f64) -> f64 {
    let ga = a.edge_graph();
    let mut total = 0usize;
    let mut ok = 0usize;
    for u in 0..ga.n_vertices() {
        for &(v, la) in ga.neighbors(u) {
            if v > u {
                total += 1;
                let lb = geom::dist(b.vertices()[u], b.vertices()[v]);
                if (lb / la - 1.0).abs() <= tol {
                    ok += 1;
                }
            }
        }
    }
    ok as f64 / total.max(1) as f64
}

/// Result of [`decimate`]: the coarse mesh and, for every original vertex, the
/// nearest surviving vertex (in coarse indices).
#[derive(Clone, Debug)]
pub struct Decimation {
    pub mesh: TriangleMesh,
    pub nearest: Vec<usize>,
}

/// Shortest-edge collapse down to `fraction` of the vertices.
///
/// The lower-index endpoint survives in place. Collapses that touch the boundary,
/// break the link condition, or flip a face are skipped.
pub fn decimate(mesh: &TriangleMesh, fraction: f64) -> Result<Decimation> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "decimation fraction {fraction} must lie in (0, 1]"
        )));
    }
    let n = mesh.n_vertices();
    let target = (fraction * n as f64).round() as usize;
    if target < 4 {
        return Err(Error::InvalidArgument(format!(
            "decimating {n} vertices to {target} would leave fewer than 4"
        )));
    }
    let pos = mesh.vertices();
    let boundary = mesh.boundary_vertices();
    let mut faces: Vec<Option<[usize; 3]>> = mesh.faces().iter().copied().map(Some).collect();
    let mut vfaces: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    for (fi, f) in mesh.faces().iter().enumerate() {
        for &v in f {
            vfaces[v].insert(fi);
        }
    }
    let mut alive = vec![true; n];
    let mut n_alive = n;

    let key = |a: usize, b: usize| {
        let (a, b) = mesh::edge_key(a, b);
        Reverse((geom::dist(pos[a], pos[b]).to_bits(), a, b))
    };
    let mut heap: BinaryHeap<_> = mesh
        .edge_face_counts()
        .into_keys()
        .map(|(a, b)| key(a, b))
        .collect();

    let neighbors = |v: usize, faces: &[Option<[usize; 3]>], vfaces: &[HashSet<usize>]| {
        let mut s = HashSet::new();
        for &fi in &vfaces[v] {
            for &w in faces[fi].as_ref().unwrap() {
                if w != v {
                    s.insert(w);
                }
            }
        }
        s
    };

    while n_alive > target {
        let Some(Reverse((_, u, v))) = heap.pop() else {
            return Err(Error::Numerical(format!(
                "decimation stalled at {n_alive} vertices, target {target}"
            )));
        };
        if !alive[u] || !alive[v] || boundary[u] || boundary[v] {
            continue;
        }
        let shared: Vec<usize> = vfaces[u].intersection(&vfaces[v]).copied().collect();
        if shared.is_empty() {
            continue;
        }
        let nu = neighbors(u, &faces, &vfaces);
        let nv = neighbors(v, &faces, &vfaces);
        let mut opposite: Vec<usize> = shared
            .iter()
            .map(|&fi| {
                faces[fi]
                    .unwrap()
                    .into_iter()
                    .find(|&w| w != u && w != v)
                    .unwrap()
            })
            .collect();
        opposite.sort_unstable();
        let mut common: Vec<usize> = nu.intersection(&nv).copied().collect();
        common.sort_unstable();
        if common != opposite || shared.len() != 2 {
            continue;
        }
        let flips = vfaces[v].iter().any(|&fi| {
            if shared.contains(&fi) {
                return false;
            }
            let f = faces[fi].unwrap();
            let moved = f.map(|w| if w == v { u } else { w });
            let before = face_normal(f.map(|w| pos[w]));
            let after = face_normal(moved.map(|w| pos[w]));
            let area_after = 0.5 * geom::norm(after);
            geom::dot(before, after) <= 0.0 || area_after <= 1e-3 * 0.5 * geom::norm(before)
        });
        if flips {
            continue;
        }
        for &fi in &shared {
            for w in faces[fi].unwrap() {
                vfaces[w].remove(&fi);
            }
            faces[fi] = None;
        }
        let moved: Vec<usize> = vfaces[v].drain().collect();
        for fi in moved {
            let f = faces[fi].as_mut().unwrap();
            for w in f.iter_mut() {
                if *w == v {
                    *w = u;
                }
            }
            vfaces[u].insert(fi);
        }
        alive[v] = false;
        n_alive -= 1;
        let mut fresh: Vec<usize> = nv
            .into_iter()
            .filter(|w| *w != u && !nu.contains(w))
            .collect();
        fresh.sort_unstable();
        for w in fresh {
            heap.push(key(u, w));
        }
    }

    let mut remap = vec![usize::MAX; n];
    let mut vertices = Vec::with_capacity(n_alive);
    for v in 0..n {
        if alive[v] {
            remap[v] = vertices.len();
            vertices.push(pos[v]);
        }
    }
    let new_faces: Vec<[usize; 3]> = faces
        .into_iter()
        .flatten()
        .map(|f| f.map(|w| remap[w]))
        .collect();
    let coarse = TriangleMesh::new(vertices, new_faces, format!("{}-decimated", mesh.name()))?;
    let nearest = nearest_vertices(pos, coarse.vertices());
    Ok(Decimation {
        mesh: coarse,
        nearest,
    })
}

/// For every point in `queries`, the index of the closest point in `sites` (lowest
/// index on ties).
fn nearest_vertices(queries: &[Vec3], sites: &[Vec3]) -> Vec<usize> {
    let rows: Vec<Vec<f64>> = sites.iter().map(|p| p.to_vec()).collect();
    let index = crate::matching::NeighborIndex::from_rows(&rows).expect("nonempty sites");
    crate::par::map_slice(queries, |q| index.nearest(q).0)
}

/// Where a pair came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub magnitude: f64,
    pub decimate: Option<f64>,
}

/// Two unit-area meshes with a ground-truth map from the first to the second.
#[derive(Clone, Debug)]
pub struct ShapePair {
    pub mesh1: TriangleMesh,
    pub mesh2: TriangleMesh,
    pub gt: PointMap,
    pub provenance: Provenance,
}

/// Eigenfunctions used to build deformation fields.
const DEFORM_BASIS_K: usize = 9;

/// Deforms one template twice with independent seeds; optionally decimates the
/// second copy. Both meshes are normalized to unit area.
pub fn make_pair(
    kind: &TemplateKind,
    seed: u64,
    magnitude: f64,
    decimate_target: Option<f64>,
) -> Result<ShapePair> {
    let template = generate_template(kind)?;
    let basis = deformation_basis(&template)?;
    make_pair_from(
        &template,
        &basis,
        kind.to_string(),
        seed,
        magnitude,
        decimate_target,
    )
}

/// Low-frequency eigenfunctions of a template, as used by [`make_pair`].
pub fn deformation_basis(template: &TriangleMesh) -> Result<SpectralBasis> {
    let ops = Operators::from_mesh(template)?;
    eigenbasis(
        &ops.stiffness,
        &ops.mass,
        DEFORM_BASIS_K.min(template.n_vertices() - 1),
    )
}

/// [`make_pair`] with a precomputed template basis.
pub fn make_pair_from(
    template: &TriangleMesh,
    basis: &SpectralBasis,
    generator: String,
    seed: u64,
    magnitude: f64,
    decimate_target: Option<f64>,
) -> Result<ShapePair> {
    let seed_a = crate::rng::derive_seed(seed, "pair/source");
    let seed_b = crate::rng::derive_seed(seed, "pair/target");
    let mesh1 = deform(template, basis, seed_a, magnitude)?;
    let mut mesh2 = deform(template, basis, seed_b, magnitude)?;
    let mut gt = (0..mesh1.n_vertices()).collect::<Vec<_>>();
    if let Some(frac) = decimate_target.filter(|&f| f < 1.0) {
        let d = decimate(&mesh2, frac)?;
        mesh2 = d.mesh;
        gt = d.nearest;
    }
    let mesh1 = mesh1
        .normalize_to_unit_area()?
        .with_name(format!("{generator}-{seed}-a"));
    let mesh2 = mesh2
        .normalize_to_unit_area()?
        .with_name(format!("{generator}-{seed}-b"));
    let n2 = mesh2.n_vertices();
    Ok(ShapePair {
        mesh1,
        mesh2,
        gt: PointMap::new(gt, n2)?,
        provenance: Provenance {
            generator,
            seed,
            magnitude,
            decimate: decimate_target,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest row; paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub mesh1: PathBuf,
    pub mesh2: PathBuf,
    pub gt: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pairs: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, pairs: Vec<ManifestEntry>) -> Self {
        Self {
            pairs,
            root: root.into(),
        }
    }

    /// Directory the relative paths resolve against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    /// Loads a manifest and checks every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_string(path)?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for p in &m.pairs {
            for rel in [&p.mesh1, &p.mesh2, &p.gt] {
                let full = m.resolve(rel);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry missing"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fsutil::write_atomic(path, text.as_bytes())
    }
}

/// Writes a pair's meshes and ground truth under `dir` with the given stem and
/// returns the manifest row (relative to `dir`).
pub fn write_pair(pair: &ShapePair, dir: &Path, stem: &str, split: Split) -> Result<ManifestEntry> {
    let entry = ManifestEntry {
        mesh1: PathBuf::from(format!("{stem}_a.off")),
        mesh2: PathBuf::from(format!("{stem}_b.off")),
        gt: PathBuf::from(format!("{stem}.gt.txt")),
        split,
    };
    mesh::save_off(&pair.mesh1, dir.join(&entry.mesh1))?;
    mesh::save_off(&pair.mesh2, dir.join(&entry.mesh2))?;
    pair.gt.save(&dir.join(&entry.gt))?;
    Ok(entry)
}

/// Operators and bases on disk, keyed by mesh file content.
#[derive(Clone, Debug)]
pub struct ShapeCache {
    dir: PathBuf,
}

/// A mesh with everything training needs.
#[derive(Clone, Debug)]
pub struct CachedShape {
    pub mesh: TriangleMesh,
    pub operators: Operators,
    pub basis: SpectralBasis,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

impl CacheStats {
    pub fn merge(&mut self, other: CacheStats) {
        self.hits += other.hits;
        self.misses += other.misses;
    }
}

impl ShapeCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn paths(&self, mesh_bytes: &[u8], k: usize) -> (PathBuf, PathBuf) {
        let h = fsutil::sha256_hex(mesh_bytes);
        (
            self.dir.join(format!("{h}.scop")),
            self.dir.join(format!("{h}-k{k}.scsb")),
        )
    }

    /// Loads (or computes and stores) the operators and k-basis of a mesh file.
    pub fn load(&self, mesh_path: &Path, k: usize) -> Result<(CachedShape, CacheStats)> {
        let bytes = fsutil::read(mesh_path)?;
        let mesh = mesh::load_mesh(mesh_path)?;
        let (ops_path, basis_path) = self.paths(&bytes, k);
        let mut stats = CacheStats::default();
        let operators = if ops_path.is_file() {
            stats.hits += 1;
            Operators::load(&ops_path)?
        } else {
            stats.misses += 1;
            let ops = Operators::from_mesh(&mesh)?;
            ops.save(&ops_path)?;
            ops
        };
        if operators.dim() != mesh.n_vertices() {
            return Err(Error::Dimension(format!(
                "cached operators for {} vertices, mesh {} has {}",
                operators.dim(),
                mesh_path.display(),
                mesh.n_vertices()
            )));
        }
        let basis = if basis_path.is_file() {
            stats.hits += 1;
            SpectralBasis::load(&basis_path, &operators.mass)?
        } else {
            stats.misses += 1;
            let b = eigenbasis(&operators.stiffness, &operators.mass, k)?;
            b.save(&basis_path)?;
            b
        };
        Ok((
            CachedShape {
                mesh,
                operators,
                basis,
            },
            stats,
        ))
    }
}

/// Ensures operators and bases exist for every mesh of the given entries.
pub fn cache_pipeline(
    cache: &ShapeCache,
    manifest: &DatasetManifest,
    entries: &[ManifestEntry],
    k: usize,
) -> Result<CacheStats> {
    let mut paths: Vec<PathBuf> = Vec::new();
    for e in entries {
        for p in [&e.mesh1, &e.mesh2] {
            let full = manifest.resolve(p);
            if !paths.contains(&full) {
                paths.push(full);
            }
        }
    }
    let results = crate::par::map_slice(&paths, |p| cache.load(p, k).map(|(_, s)| s));
    let mut stats = CacheStats::default();
    for r in results {
        stats.merge(r?);
    }
    Ok(stats)
}
