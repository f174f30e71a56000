//! Cotangent stiffness, lumped mass and the discrete Dirichlet energy.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::{self, LeReader, LeWriter};
use crate::geom;
use crate::linalg::CsrMatrix;
use crate::mesh::TriangleMesh;

/// Largest cotangent magnitude accepted during assembly.
pub const MAX_COTANGENT: f64 = 1e8;

/// Tolerance below zero tolerated for `gᵀWg`, relative to `‖g‖²`.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Symmetric positive semidefinite cotangent stiffness matrix `W`.
///
/// Off-diagonals are `-½ Σ cot(opposite angle)`; each diagonal is minus its row's
/// off-diagonal sum, so `gᵀWg` is the Dirichlet energy of `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct StiffnessMatrix(CsrMatrix);

impl StiffnessMatrix {
    /// Wraps an assembled matrix after checking it is square and exactly symmetric.
    pub fn from_csr(m: CsrMatrix) -> Result<Self> {
        if !m.is_symmetric() {
            return Err(Error::InvalidArgument(
                "stiffness matrix must be square and symmetric".into(),
            ));
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.n_rows()
    }

    pub fn csr(&self) -> &CsrMatrix {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }
}

/// Diagonal lumped mass matrix `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct MassMatrix(Vec<f64>);

impl MassMatrix {
    pub fn from_diagonal(diag: Vec<f64>) -> Result<Self> {
        if let Some(i) = diag.iter().position(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mass entry {i} = {} is not positive",
                diag[i]
            )));
        }
        Ok(Self(diag))
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn trace(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Assembles the cotangent stiffness matrix.
///
/// Obtuse angles keep their negative cotangents; boundary edges get one term.
pub fn cotangent_stiffness(mesh: &TriangleMesh) -> Result<StiffnessMatrix> {
    let n = mesh.n_vertices();
    let mut off: Vec<(usize, usize, f64)> = Vec::with_capacity(mesh.n_faces() * 6);
    for (fi, f) in mesh.faces().iter().enumerate() {
        let p = mesh.face_corners(fi);
        for k in 0..3 {
            let (a, b, c) = (k, (k + 1) % 3, (k + 2) % 3);
            let cot = geom::cot_at(p[a], p[b], p[c]);
            if !cot.is_finite() || cot.abs() > MAX_COTANGENT {
                return Err(Error::DegenerateFace {
                    face: fi,
                    msg: format!("cotangent {cot:e} at corner {}", f[a]),
                });
            }
            let w = -0.5 * cot;
            off.push((f[b], f[c], w));
            off.push((f[c], f[b], w));
        }
    }
    let offdiag = CsrMatrix::from_triplets(n, n, &off)?;
    let mut triplets = offdiag.triplets();
    for i in 0..n {
        let (_, vals) = offdiag.row(i);
        let s: f64 = vals.iter().sum();
        triplets.push((i, i, -s));
    }
    Ok(StiffnessMatrix(CsrMatrix::from_triplets(n, n, &triplets)?))
}

pub fn lumped_mass(mesh: &TriangleMesh) -> MassMatrix {
    MassMatrix(mesh.vertex_areas())
}

/// `gᵀWg`, clamped to zero when it is negative only within [`PSD_TOLERANCE`].
pub fn dirichlet_energy(w: &StiffnessMatrix, g: &[f64]) -> Result<f64> {
    if g.len() != w.dim() {
        return Err(Error::Dimension(format!(
            "function of length {} on a {}-vertex operator",
            g.len(),
            w.dim()
        )));
    }
    let e = w.0.quadratic_form(g)?;
    if e >= 0.0 {
        return Ok(e);
    }
    let norm2: f64 = g.iter().map(|x| x * x).sum();
    if e >= -PSD_TOLERANCE * norm2 {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!(
            "negative Dirichlet energy {e:e} for ‖g‖² = {norm2:e}"
        )))
    }
}

/// Stiffness and mass of one mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Operators {
    pub stiffness: StiffnessMatrix,
    pub mass: MassMatrix,
}

const OPS_MAGIC: &[u8; 4] = b"SCOP";
const OPS_VERSION: u8 = 1;

impl Operators {
    pub fn from_mesh(mesh: &TriangleMesh) -> Result<Self> {
        Ok(Self {
            stiffness: cotangent_stiffness(mesh)?,
            mass: lumped_mass(mesh),
        })
    }

    pub fn dim(&self) -> usize {
        self.mass.dim()
    }

    /// `SCOP` container: magic, version, n (u32), nnz (u32), `(u32 row, u32 col, f64)`
    /// triplets, then n mass entries. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::default();
        w.bytes(OPS_MAGIC);
        w.u8(OPS_VERSION);
        let trip = self.stiffness.csr().triplets();
        w.u32(self.dim() as u32);
        w.u32(trip.len() as u32);
        for (i, j, v) in trip {
            w.u32(i as u32);
            w.u32(j as u32);
            w.f64(v);
        }
        for &a in self.mass.diagonal() {
            w.f64(a);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        r.expect_magic(OPS_MAGIC)?;
        let version = r.u8()?;
        if version != OPS_VERSION {
            return Err(Error::Format(format!("unsupported SCOP version {version}")));
        }
        let n = r.u32()? as usize;
        let nnz = r.u32()? as usize;
        let mut trip = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let i = r.u32()? as usize;
            let j = r.u32()? as usize;
            trip.push((i, j, r.f64()?));
        }
        let mass = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if !r.is_at_end() {
            return Err(Error::Format("trailing bytes after SCOP payload".into()));
        }
        Ok(Self {
            stiffness: StiffnessMatrix::from_csr(CsrMatrix::from_triplets(n, n, &trip)?)?,
            mass: MassMatrix::from_diagonal(mass)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mesh::fixtures::{equilateral, tetrahedron};
    use crate::synth::{generate_template, TemplateKind};

    #[test]
    fn equilateral_entries() {
        let w = cotangent_stiffness(&equilateral()).unwrap();
        let off = -1.0 / (2.0 * 3f64.sqrt());
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 / 3f64.sqrt() } else { off };
                assert!((w.get(i, j) - expected).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn right_isoceles_hypotenuse_weight_vanishes() {
        let m = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            "right",
        )
        .unwrap();
        let w = cotangent_stiffness(&m).unwrap();
        assert!(w.get(1, 2).abs() < 1e-15);
        assert!((w.get(0, 1) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn constants_in_kernel() {
        for m in [
            tetrahedron(),
            generate_template(&TemplateKind::Icosphere { subdivisions: 2 }).unwrap(),
            generate_template(&TemplateKind::Cylinder {
                rings: 6,
                segments: 12,
            })
            .unwrap(),
        ] {
            let w = cotangent_stiffness(&m).unwrap();
            let ones = vec![1.0; m.n_vertices()];
            let r = w.csr().mul_vec(&ones).unwrap();
            let maxdiag = w.csr().diagonal().into_iter().fold(0.0, f64::max);
            assert!(r.iter().all(|x| x.abs() <= 1e-10 * maxdiag));
            assert!(dirichlet_energy(&w, &ones).unwrap() <= 1e-12 * maxdiag);
        }
    }

    #[test]
    fn energy_is_quadratic_and_nonnegative() {
        let m = generate_template(&TemplateKind::Bar { resolution: 3 }).unwrap();
        let w = cotangent_stiffness(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g: Vec<f64> = (0..m.n_vertices())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let e = dirichlet_energy(&w, &g).unwrap();
            assert!(e >= 0.0);
            let g3: Vec<f64> = g.iter().map(|x| 3.0 * x).collect();
            let e3 = dirichlet_energy(&w, &g3).unwrap();
            assert!((e3 - 9.0 * e).abs() <= 1e-12 * e3.max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let w = cotangent_stiffness(&tetrahedron()).unwrap();
        assert!(matches!(
            dirichlet_energy(&w, &[1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn scale_invariance_of_stiffness() {
        let m = tetrahedron();
        let scaled = m
            .with_vertices(m.vertices().iter().map(|&p| geom::scale(p, 7.0)).collect())
            .unwrap();
        let w1 = cotangent_stiffness(&m).unwrap();
        let w2 = cotangent_stiffness(&scaled).unwrap();
        for (i, j, v) in w1.csr().triplets() {
            assert!((w2.get(i, j) - v).abs() < 1e-12);
        }
        let a1 = lumped_mass(&m);
        let a2 = lumped_mass(&scaled);
        for (x, y) in a1.diagonal().iter().zip(a2.diagonal()) {
            assert!((y - 49.0 * x).abs() < 1e-12 * y);
        }
    }

    #[test]
    fn sliver_triangle_is_rejected() {
        let m = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1e-9, 0.0]],
            vec![[0, 1, 2]],
            "sliver",
        )
        .unwrap();
        assert!(matches!(
            cotangent_stiffness(&m),
            Err(Error::DegenerateFace { face: 0, .. })
        ));
    }

    #[test]
    fn scop_round_trip() {
        let ops = Operators::from_mesh(
            &generate_template(&TemplateKind::Icosphere { subdivisions: 1 }).unwrap(),
        )
        .unwrap();
        let bytes = ops.to_bytes();
        assert_eq!(&bytes[..4], b"SCOP");
        assert_eq!(Operators::from_bytes(&bytes).unwrap(), ops);
        assert!(Operators::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
