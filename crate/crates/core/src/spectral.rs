//! Laplace–Beltrami eigenbases, functional maps and spectral diffusion.
//!
//! The generalized problem `W φ = λ A φ` is solved either densely, through the
//! symmetric matrix `A^{-1/2} W A^{-1/2}`, or by shift-invert subspace iteration
//! with a sparse Cholesky factor for larger meshes. Functional maps are computed
//! from soft or hard point maps with the area-weighted projection `Φ₁ᵀ A₁ Π Φ₂`,
//! which needs nothing but matrix products and row gathers: see [`MatProducts`].

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fsutil::{self, LeReader, LeWriter};
use crate::linalg::{CsrMatrix, EnvelopeCholesky};
use crate::losses::SoftCorrespondence;
use crate::matching::PointMap;
use crate::operators::{MassMatrix, StiffnessMatrix};
use crate::par;

/// Basis size used for the spectral loss and the diffusion blocks.
pub const DEFAULT_K: usize = 30;

/// Meshes up to this many vertices use the dense eigensolver.
pub const DENSE_MAX_VERTICES: usize = 1200;

/// Shift of the shift-invert iteration, relative to `max Wᵢᵢ/Aᵢᵢ`.
pub const RELATIVE_SHIFT: f64 = 1e-8;

const RESIDUAL_TOL: f64 = 1e-9;
const MAX_SUBSPACE_ITERS: usize = 2000;

/// First `k` eigenpairs of `(W, A)`, A-orthonormal, eigenvalues ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    phi: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    mass: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenMethod {
    /// Dense up to [`DENSE_MAX_VERTICES`], shift-invert above.
    Auto,
    Dense,
    ShiftInvert,
}

impl SpectralBasis {
    /// Assembles a basis from raw parts, checking only that the shapes agree.
    pub fn from_parts(phi: DMatrix<f64>, eigenvalues: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        if eigenvalues.len() != phi.ncols() || mass.len() != phi.nrows() {
            return Err(Error::Dimension(format!(
                "Φ is {}x{} with {} eigenvalues and {} masses",
                phi.nrows(),
                phi.ncols(),
                eigenvalues.len(),
                mass.len()
            )));
        }
        Ok(Self {
            phi,
            eigenvalues,
            mass,
        })
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Lumped mass the basis is orthonormal against.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn k(&self) -> usize {
        self.phi.ncols()
    }

    /// The first `k` columns.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a {}-column basis to {k}",
                self.k()
            )));
        }
        Ok(Self {
            phi: self.phi.columns(0, k).into_owned(),
            eigenvalues: self.eigenvalues[..k].to_vec(),
            mass: self.mass.clone(),
        })
    }

    /// Flips the sign of selected columns.
    pub fn with_signs(&self, signs: &[f64]) -> Self {
        let mut phi = self.phi.clone();
        for (j, &s) in signs.iter().enumerate().take(self.k()) {
            phi.column_mut(j).scale_mut(s);
        }
        Self {
            phi,
            eigenvalues: self.eigenvalues.clone(),
            mass: self.mass.clone(),
        }
    }

    /// Spectral coefficients `Φᵀ A X` of the columns of `x`.
    pub fn analyze(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.n() {
            return Err(Error::Dimension(format!(
                "signal has {} rows, basis has {}",
                x.nrows(),
                self.n()
            )));
        }
        let ax = scale_rows(x, &self.mass);
        Ok(self.phi.tr_mul(&ax))
    }

    /// `Φ C`.
    pub fn synthesize(&self, coef: &DMatrix<f64>) -> DMatrix<f64> {
        &self.phi * coef
    }

    /// Largest deviation of `ΦᵀAΦ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.phi.tr_mul(&scale_rows(&self.phi, &self.mass));
        let mut worst: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Per-column `‖Wφᵢ − λᵢAφᵢ‖ / (‖Aφᵢ‖ max(1, λᵢ))`.
    pub fn relative_residuals(&self, w: &StiffnessMatrix) -> Result<Vec<f64>> {
        let wphi = w.csr().mul_dense(&self.phi)?;
        let aphi = scale_rows(&self.phi, &self.mass);
        Ok((0..self.k())
            .map(|i| {
                let lam = self.eigenvalues[i];
                let r = wphi.column(i) - aphi.column(i) * lam;
                r.norm() / (aphi.column(i).norm() * lam.max(1.0))
            })
            .collect())
    }

    /// `SCSB` container: magic, version, n (u32), k (u32), k eigenvalues, Φ column-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::default();
        w.bytes(BASIS_MAGIC);
        w.u8(BASIS_VERSION);
        w.u32(self.n() as u32);
        w.u32(self.k() as u32);
        for &l in &self.eigenvalues {
            w.f64(l);
        }
        for &v in self.phi.as_slice() {
            w.f64(v);
        }
        w.buf
    }

    /// Decodes an `SCSB` container; the mass diagonal lives in the operator cache.
    pub fn from_bytes(bytes: &[u8], mass: &MassMatrix) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        r.expect_magic(BASIS_MAGIC)?;
        let version = r.u8()?;
        if version != BASIS_VERSION {
            return Err(Error::Format(format!("unsupported SCSB version {version}")));
        }
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        if n != mass.dim() {
            return Err(Error::Dimension(format!(
                "basis for {n} vertices with a {}-vertex mass matrix",
                mass.dim()
            )));
        }
        let eigenvalues = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let data = (0..n * k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if !r.is_at_end() {
            return Err(Error::Format("trailing bytes after SCSB payload".into()));
        }
        Ok(Self {
            phi: DMatrix::from_vec(n, k, data),
            eigenvalues,
            mass: mass.diagonal().to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, mass: &MassMatrix) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?, mass)
    }
}

const BASIS_MAGIC: &[u8; 4] = b"SCSB";
const BASIS_VERSION: u8 = 1;

pub(crate) fn scale_rows(x: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone();
    for j in 0..out.ncols() {
        for (v, &si) in out.column_mut(j).iter_mut().zip(s) {
            *v *= si;
        }
    }
    out
}

/// First `k` generalized eigenpairs of `W φ = λ A φ`.
pub fn eigenbasis(w: &StiffnessMatrix, a: &MassMatrix, k: usize) -> Result<SpectralBasis> {
    eigenbasis_with(w, a, k, EigenMethod::Auto)
}

pub fn eigenbasis_with(
    w: &StiffnessMatrix,
    a: &MassMatrix,
    k: usize,
    method: EigenMethod,
) -> Result<SpectralBasis> {
    let n = w.dim();
    if a.dim() != n {
        return Err(Error::Dimension(format!(
            "stiffness is {n}x{n}, mass has {} entries",
            a.dim()
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "basis size k = {k} must satisfy 1 <= k < n = {n}"
        )));
    }
    let dense = match method {
        EigenMethod::Dense => true,
        EigenMethod::ShiftInvert => false,
        EigenMethod::Auto => n <= DENSE_MAX_VERTICES,
    };
    let (mut eigenvalues, mut phi) = if dense {
        dense_eigen(w, a, k)
    } else {
        shift_invert_eigen(w, a, k)?
    };
    let scale = eigenvalues.last().copied().unwrap_or(1.0).abs().max(1.0);
    for l in eigenvalues.iter_mut() {
        if *l < 0.0 {
            if *l < -1e-9 * scale {
                return Err(Error::Numerical(format!(
                    "negative eigenvalue {l:e}; stiffness is not semidefinite"
                )));
            }
            *l = 0.0;
        }
    }
    fix_signs(&mut phi);
    Ok(SpectralBasis {
        phi,
        eigenvalues,
        mass: a.diagonal().to_vec(),
    })
}

/// Makes the largest-magnitude entry of every column positive (lowest index on ties).
fn fix_signs(phi: &mut DMatrix<f64>) {
    for j in 0..phi.ncols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, v) in phi.column(j).iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if phi[(best, j)] < 0.0 {
            phi.column_mut(j).neg_mut();
        }
    }
}

fn dense_eigen(w: &StiffnessMatrix, a: &MassMatrix, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = w.dim();
    let d: Vec<f64> = a.diagonal().iter().map(|x| 1.0 / x.sqrt()).collect();
    let mut b = DMatrix::zeros(n, n);
    for (i, j, v) in w.csr().triplets() {
        // product d_i d_j first keeps B exactly symmetric
        b[(i, j)] = (d[i] * d[j]) * v;
    }
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        eig.eigenvalues[x]
            .partial_cmp(&eig.eigenvalues[y])
            .unwrap()
            .then(x.cmp(&y))
    });
    let mut phi = DMatrix::zeros(n, k);
    let mut vals = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        vals.push(eig.eigenvalues[idx]);
        for i in 0..n {
            phi[(i, c)] = d[i] * eig.eigenvectors[(i, idx)];
        }
    }
    (vals, phi)
}

/// Modified Gram–Schmidt in the A inner product, two passes.
fn a_orthonormalize(y: &mut DMatrix<f64>, mass: &[f64]) -> Result<()> {
    let p = y.ncols();
    for j in 0..p {
        let original: f64 = a_norm(&y.column(j).into_owned(), mass);
        for _pass in 0..2 {
            for l in 0..j {
                let proj: f64 = (0..y.nrows())
                    .map(|i| y[(i, l)] * mass[i] * y[(i, j)])
                    .sum();
                for i in 0..y.nrows() {
                    let v = y[(i, l)];
                    y[(i, j)] -= proj * v;
                }
            }
        }
        let nrm = a_norm(&y.column(j).into_owned(), mass);
        if !(nrm > 1e-13 * original) || !nrm.is_finite() {
            return Err(Error::Convergence(format!(
                "subspace collapsed at column {j}"
            )));
        }
        y.column_mut(j).scale_mut(1.0 / nrm);
    }
    Ok(())
}

fn a_norm(v: &nalgebra::DVector<f64>, mass: &[f64]) -> f64 {
    v.iter()
        .zip(mass)
        .map(|(x, m)| x * x * m)
        .sum::<f64>()
        .sqrt()
}

fn shift_invert_eigen(
    w: &StiffnessMatrix,
    a: &MassMatrix,
    k: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = w.dim();
    let mass = a.diagonal();
    let p = (2 * k).max(k + 8).min(n);
    let spectral_scale = w
        .csr()
        .diagonal()
        .iter()
        .zip(mass)
        .map(|(wi, ai)| wi / ai)
        .fold(0.0, f64::max);
    let shift = RELATIVE_SHIFT * spectral_scale;
    let shifted: CsrMatrix = w.csr().add_diagonal(mass, shift)?;
    let chol = EnvelopeCholesky::factor(&shifted)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ba51);
    let mut x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    a_orthonormalize(&mut x, mass)?;

    for _iter in 0..MAX_SUBSPACE_ITERS {
        let cols = par::map_range(p, |j| {
            let rhs: Vec<f64> = (0..n).map(|i| mass[i] * x[(i, j)]).collect();
            chol.solve(&rhs)
        });
        let mut y = DMatrix::zeros(n, p);
        for (j, col) in cols.into_iter().enumerate() {
            for (i, v) in col?.into_iter().enumerate() {
                y[(i, j)] = v;
            }
        }
        a_orthonormalize(&mut y, mass)?;
        let wy = w.csr().mul_dense(&y)?;
        let mut small = y.tr_mul(&wy);
        let sym = (&small + small.transpose()) * 0.5;
        small.copy_from(&sym);
        let eig = SymmetricEigen::new(small);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| {
            eig.eigenvalues[i]
                .partial_cmp(&eig.eigenvalues[j])
                .unwrap()
                .then(i.cmp(&j))
        });
        let mut z = DMatrix::zeros(p, p);
        let mut theta = Vec::with_capacity(p);
        for (c, &idx) in order.iter().enumerate() {
            theta.push(eig.eigenvalues[idx]);
            z.set_column(c, &eig.eigenvectors.column(idx));
        }
        x = &y * z;

        let wx = w.csr().mul_dense(&x.columns(0, k).into_owned())?;
        let converged = (0..k).all(|i| {
            let mut r2 = 0.0;
            let mut ax2 = 0.0;
            for row in 0..n {
                let ax = mass[row] * x[(row, i)];
                let r = wx[(row, i)] - theta[i] * ax;
                r2 += r * r;
                ax2 += ax * ax;
            }
            r2.sqrt() <= RESIDUAL_TOL * ax2.sqrt() * theta[i].max(1.0)
        });
        if converged {
            return Ok((theta[..k].to_vec(), x.columns(0, k).into_owned()));
        }
    }
    Err(Error::Convergence(format!(
        "subspace iteration exceeded {MAX_SUBSPACE_ITERS} iterations for k = {k}"
    )))
}

/// A `k₁×k₂` functional map.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalMap(pub DMatrix<f64>);

impl FunctionalMap {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Squared Frobenius distance.
    pub fn distance2(&self, other: &FunctionalMap) -> f64 {
        (&self.0 - &other.0).norm_squared()
    }
}

/// The only matrix operations available to the functional-map path.
///
/// There is deliberately no solve or inverse here.
pub trait MatProducts {
    /// `a b`.
    fn mul(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64>;
    /// `aᵀ b`.
    fn tr_mul(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64>;
    /// `a bᵀ`.
    fn mul_tr(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64>;
    /// `diag(s) a`.
    fn scale_rows(&self, a: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64>;
    /// Rows `idx` of `a`, in order.
    fn gather_rows(&self, a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64>;
}

/// Plain dense products.
#[derive(Clone, Copy, Debug, Default)]
pub struct DenseProducts;

impl MatProducts for DenseProducts {
    fn mul(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a * b
    }
    fn tr_mul(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a.tr_mul(b)
    }
    fn mul_tr(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a * b.transpose()
    }
    fn scale_rows(&self, a: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
        scale_rows(a, s)
    }
    fn gather_rows(&self, a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), a.ncols(), |r, c| a[(idx[r], c)])
    }
}

/// `C = Φ₁ᵀ A₁ Π Φ₂`.
pub fn project_softmap_to_fmap(
    pi: &SoftCorrespondence,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
) -> Result<FunctionalMap> {
    project_softmap_to_fmap_with(&DenseProducts, pi.matrix(), basis1, basis2)
}

/// [`project_softmap_to_fmap`] over any product implementation, for raw matrices.
pub fn project_softmap_to_fmap_with<P: MatProducts>(
    ops: &P,
    pi: &DMatrix<f64>,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
) -> Result<FunctionalMap> {
    if pi.nrows() != basis1.n() || pi.ncols() != basis2.n() {
        return Err(Error::Dimension(format!(
            "soft map is {}x{}, bases have {} and {} vertices",
            pi.nrows(),
            pi.ncols(),
            basis1.n(),
            basis2.n()
        )));
    }
    let pi_phi2 = ops.mul(pi, basis2.phi());
    let a_phi1 = ops.scale_rows(basis1.phi(), basis1.mass());
    Ok(FunctionalMap(ops.tr_mul(&a_phi1, &pi_phi2)))
}

/// Functional map of a hard point map, gathering rows of `Φ₂` instead of
/// building the binary matrix.
pub fn fmap_from_pointmap(
    pmap: &PointMap,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
) -> Result<FunctionalMap> {
    fmap_from_pointmap_with(&DenseProducts, pmap, basis1, basis2)
}

pub fn fmap_from_pointmap_with<P: MatProducts>(
    ops: &P,
    pmap: &PointMap,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
) -> Result<FunctionalMap> {
    if pmap.len() != basis1.n() {
        return Err(Error::Dimension(format!(
            "point map of length {} for a {}-vertex source",
            pmap.len(),
            basis1.n()
        )));
    }
    if let Some(&bad) = pmap.targets().iter().find(|&&t| t >= basis2.n()) {
        return Err(Error::InvalidArgument(format!(
            "point map target {bad} out of range for {} vertices",
            basis2.n()
        )));
    }
    let gathered = ops.gather_rows(basis2.phi(), pmap.targets());
    let a_phi1 = ops.scale_rows(basis1.phi(), basis1.mass());
    Ok(FunctionalMap(ops.tr_mul(&a_phi1, &gathered)))
}

/// Heat diffusion restricted to the basis: `Φ diag(e^{-λ t_j}) Φᵀ A x_j` per channel.
pub fn spectral_diffuse(
    basis: &SpectralBasis,
    signal: &DMatrix<f64>,
    times: &[f64],
) -> Result<DMatrix<f64>> {
    if times.len() != signal.ncols() {
        return Err(Error::Dimension(format!(
            "{} diffusion times for {} channels",
            times.len(),
            signal.ncols()
        )));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "diffusion time {t} must be positive"
        )));
    }
    let mut coef = basis.analyze(signal)?;
    for (j, &t) in times.iter().enumerate() {
        for (i, &lam) in basis.eigenvalues().iter().enumerate() {
            coef[(i, j)] *= (-lam * t).exp();
        }
    }
    Ok(basis.synthesize(&coef))
}
