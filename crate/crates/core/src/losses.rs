//! Training losses and their gradients with respect to features.
//!
//! The similarity of two points is the dot product of their L2-normalized
//! features divided by the temperature; `Π` is its row softmax. Both
//! regularizers act on the normalized features too, so neither can be lowered by
//! shrinking the feature scale.

use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{l2_normalize_backward, normalize_with_norms, FeatureMatrix};
use crate::matching::PointMap;
use crate::operators::StiffnessMatrix;
use crate::rng::substream;
use crate::spectral::{
    fmap_from_pointmap_with, project_softmap_to_fmap_with, DenseProducts, MatProducts,
    SpectralBasis,
};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_SAMPLE_COUNT: usize = 1024;
pub const DEFAULT_DIRICHLET_LAMBDA: f64 = 1.0;
/// Spectral weight for near-isometric data with shared connectivity.
pub const DEFAULT_SPECTRAL_LAMBDA: f64 = 0.1;
/// Spectral weight for remeshed or otherwise irregular data.
pub const REMESHED_SPECTRAL_LAMBDA: f64 = 10.0;
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Row-stochastic soft map `Π`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftCorrespondence(DMatrix<f64>);

impl SoftCorrespondence {
    /// Checks nonnegativity and unit row sums.
    pub fn new(pi: DMatrix<f64>) -> Result<Self> {
        if pi.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "soft map has negative or non-finite entries".into(),
            ));
        }
        for i in 0..pi.nrows() {
            let s = pi.row(i).sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "soft map row {i} sums to {s}"
                )));
            }
        }
        Ok(Self(pi))
    }

    /// Divides every row of a nonnegative matrix by its sum.
    pub fn from_unnormalized(mut raw: DMatrix<f64>) -> Result<Self> {
        for i in 0..raw.nrows() {
            let s = raw.row(i).sum();
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!("row {i} has sum {s}")));
            }
            raw.row_mut(i).unscale_mut(s);
        }
        Self::new(raw)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// `(source, target)` index pairs with distinct sources.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrespondenceSet(Vec<(usize, usize)>);

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(usize, usize)>, n_source: usize, n_target: usize) -> Result<Self> {
        let mut seen = vec![false; n_source];
        for &(s, t) in &pairs {
            if s >= n_source || t >= n_target {
                return Err(Error::InvalidArgument(format!(
                    "pair ({s}, {t}) out of range for {n_source}x{n_target}"
                )));
            }
            if std::mem::replace(&mut seen[s], true) {
                return Err(Error::InvalidArgument(format!("source {s} appears twice")));
            }
        }
        Ok(Self(pairs))
    }

    /// Every `(i, map(i))`.
    pub fn from_pointmap(map: &PointMap) -> Self {
        Self(map.targets().iter().copied().enumerate().collect())
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    Dirichlet,
    Spectral,
}

impl FromStr for Regularizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Regularizer::None),
            "dirichlet" => Ok(Regularizer::Dirichlet),
            "spectral" => Ok(Regularizer::Spectral),
            _ => Err(Error::InvalidArgument(format!(
                "regularizer '{s}' is not one of none|dirichlet|spectral"
            ))),
        }
    }
}

impl std::fmt::Display for Regularizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regularizer::None => "none",
            Regularizer::Dirichlet => "dirichlet",
            Regularizer::Spectral => "spectral",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub sample_count: usize,
    pub k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda: DEFAULT_DIRICHLET_LAMBDA,
            regularizer: Regularizer::Dirichlet,
            sample_count: DEFAULT_SAMPLE_COUNT,
            k: crate::spectral::DEFAULT_K,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tau = {} must be > 0",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda = {} must be >= 0",
                self.lambda
            )));
        }
        if self.sample_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "sample count {} must be >= 2",
                self.sample_count
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the regularizer term is evaluated at all.
    pub fn uses_regularizer(&self) -> bool {
        self.regularizer != Regularizer::None && self.lambda > 0.0
    }
}

/// Row softmax of `a bᵀ / τ` for already-normalized rows.
fn softmax_logits(a: &DMatrix<f64>, b: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut z = a * b.transpose();
    z /= tau;
    for i in 0..z.nrows() {
        let mx = z.row(i).max();
        let mut s = 0.0;
        for j in 0..z.ncols() {
            let e = (z[(i, j)] - mx).exp();
            z[(i, j)] = e;
            s += e;
        }
        z.row_mut(i).unscale_mut(s);
    }
    z
}

/// Back through a row softmax: `Π ⊙ (dΠ − rowsum(dΠ ⊙ Π))`.
fn softmax_backward(pi: &DMatrix<f64>, dpi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut dz = pi.component_mul(dpi);
    for i in 0..pi.nrows() {
        let s = dz.row(i).sum();
        for j in 0..pi.ncols() {
            dz[(i, j)] -= pi[(i, j)] * s;
        }
    }
    dz
}

fn check_same_width(g1: &FeatureMatrix, g2: &FeatureMatrix) -> Result<()> {
    if g1.d() != g2.d() {
        return Err(Error::Dimension(format!(
            "feature widths differ: {} vs {}",
            g1.d(),
            g2.d()
        )));
    }
    Ok(())
}

/// `Πᵢⱼ = softmax_j(ĝ₁ᵢ·ĝ₂ⱼ / τ)`.
pub fn similarity_matrix(
    g1: &FeatureMatrix,
    g2: &FeatureMatrix,
    tau: f64,
) -> Result<SoftCorrespondence> {
    check_same_width(g1, g2)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau = {tau} must be > 0")));
    }
    let (a, _) = normalize_with_norms(g1.matrix())?;
    let (b, _) = normalize_with_norms(g2.matrix())?;
    Ok(SoftCorrespondence(softmax_logits(&a, &b, tau)))
}

/// Mean PointInfoNCE `−(1/|gt|) Σ log Π[s, t]` and its gradient w.r.t. `Π`.
pub fn contrastive_loss(
    pi: &SoftCorrespondence,
    gt: &CorrespondenceSet,
) -> Result<(f64, DMatrix<f64>)> {
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty correspondence set".into()));
    }
    let p = pi.matrix();
    let m = gt.len() as f64;
    let mut grad = DMatrix::zeros(p.nrows(), p.ncols());
    let mut loss = 0.0;
    for &(s, t) in gt.pairs() {
        if s >= p.nrows() || t >= p.ncols() {
            return Err(Error::Dimension(format!(
                "pair ({s}, {t}) outside a {}x{} soft map",
                p.nrows(),
                p.ncols()
            )));
        }
        let v = p[(s, t)];
        if !(v > 0.0) {
            return Err(Error::Numerical(format!(
                "Π[{s}, {t}] = {v}, log undefined"
            )));
        }
        loss -= v.ln();
        grad[(s, t)] -= 1.0 / (m * v);
    }
    Ok((loss / m, grad))
}

/// `min(m, |gt|)` pairs drawn without replacement, in random order.
pub fn sample_correspondences(
    gt_full: &CorrespondenceSet,
    m: usize,
    seed: u64,
) -> Result<CorrespondenceSet> {
    if gt_full.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot sample from an empty set".into(),
        ));
    }
    let mut rng = substream(seed, "correspondences");
    let count = m.min(gt_full.len());
    let picked = rand::seq::index::sample(&mut rng, gt_full.len(), count);
    Ok(CorrespondenceSet(
        picked.into_iter().map(|i| gt_full.0[i]).collect(),
    ))
}

/// `(1/2d) Σ_c (g₁cᵀ W₁ g₁c + g₂cᵀ W₂ g₂c)` and its gradients `(W₁G₁/d, W₂G₂/d)`.
pub fn dirichlet_loss(
    g1: &DMatrix<f64>,
    w1: &StiffnessMatrix,
    g2: &DMatrix<f64>,
    w2: &StiffnessMatrix,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    if g1.ncols() != g2.ncols() {
        return Err(Error::Dimension(format!(
            "feature widths differ: {} vs {}",
            g1.ncols(),
            g2.ncols()
        )));
    }
    let d = g1.ncols() as f64;
    let wg1 = w1.csr().mul_dense(g1)?;
    let wg2 = w2.csr().mul_dense(g2)?;
    let e = g1.component_mul(&wg1).sum() + g2.component_mul(&wg2).sum();
    let norm2 = g1.norm_squared() + g2.norm_squared();
    let e = if e < 0.0 && e >= -crate::operators::PSD_TOLERANCE * norm2 {
        0.0
    } else {
        e
    };
    Ok((e / (2.0 * d), wg1 / d, wg2 / d))
}

/// `‖C − C_gt‖²_F` and `∂/∂Π = 2 A₁ Φ₁ (C − C_gt) Φ₂ᵀ`.
pub fn spectral_loss(
    pi: &SoftCorrespondence,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
    gt: &PointMap,
) -> Result<(f64, DMatrix<f64>)> {
    spectral_loss_with(&DenseProducts, pi.matrix(), basis1, basis2, gt)
}

/// [`spectral_loss`] over any product implementation; there is no solve on this path.
pub fn spectral_loss_with<P: MatProducts>(
    ops: &P,
    pi: &DMatrix<f64>,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
    gt: &PointMap,
) -> Result<(f64, DMatrix<f64>)> {
    if basis1.k() != basis2.k() {
        return Err(Error::Dimension(format!(
            "basis sizes differ: {} vs {}",
            basis1.k(),
            basis2.k()
        )));
    }
    let c = project_softmap_to_fmap_with(ops, pi, basis1, basis2)?;
    let cgt = fmap_from_pointmap_with(ops, gt, basis1, basis2)?;
    let diff = c.matrix() - cgt.matrix();
    let loss = diff.norm_squared();
    let a_phi1 = ops.scale_rows(basis1.phi(), basis1.mass());
    let left = ops.mul(&a_phi1, &diff);
    let mut grad = ops.mul_tr(&left, basis2.phi());
    grad *= 2.0;
    Ok((loss, grad))
}

/// Shape-specific data the regularizers need.
#[derive(Clone, Copy)]
pub struct ShapeTerms<'a> {
    pub stiffness: Option<&'a StiffnessMatrix>,
    pub basis: Option<&'a SpectralBasis>,
}

/// Loss value, its parts, and gradients w.r.t. the raw features.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: f64,
    pub contrastive: f64,
    pub regularizer: f64,
    pub dg1: DMatrix<f64>,
    pub dg2: DMatrix<f64>,
}

/// Contrastive loss over the sampled pairs against the (deduplicated) sampled
/// targets, plus `λ` times the configured regularizer.
///
/// `gt` is the full map (needed by the spectral term); `sample` holds the pairs
/// entering the contrastive term.
pub fn combined_loss(
    config: &LossConfig,
    g1: &FeatureMatrix,
    g2: &FeatureMatrix,
    shape1: ShapeTerms<'_>,
    shape2: ShapeTerms<'_>,
    gt: &PointMap,
    sample: &CorrespondenceSet,
) -> Result<LossOutput> {
    config.validate()?;
    check_same_width(g1, g2)?;
    let (a, na) = normalize_with_norms(g1.matrix())?;
    let (b, nb) = normalize_with_norms(g2.matrix())?;
    let (n1, n2, d) = (a.nrows(), b.nrows(), a.ncols());
    if sample.is_empty() {
        return Err(Error::InvalidArgument("no sampled correspondences".into()));
    }

    let mut targets: Vec<usize> = sample.pairs().iter().map(|p| p.1).collect();
    targets.sort_unstable();
    targets.dedup();
    let mut local_pairs = Vec::with_capacity(sample.len());
    for (r, &(s, t)) in sample.pairs().iter().enumerate() {
        if s >= n1 || t >= n2 {
            return Err(Error::Dimension(format!(
                "pair ({s}, {t}) outside {n1}x{n2}"
            )));
        }
        local_pairs.push((r, targets.binary_search(&t).unwrap()));
    }
    let sources: Vec<usize> = sample.pairs().iter().map(|p| p.0).collect();
    let a_s = DMatrix::from_fn(sources.len(), d, |r, c| a[(sources[r], c)]);
    let b_t = DMatrix::from_fn(targets.len(), d, |r, c| b[(targets[r], c)]);
    let pi_s = SoftCorrespondence(softmax_logits(&a_s, &b_t, config.tau));
    let (lc, dpi_s) = contrastive_loss(&pi_s, &CorrespondenceSet(local_pairs))?;
    let dz = softmax_backward(pi_s.matrix(), &dpi_s) / config.tau;

    let mut da = DMatrix::zeros(n1, d);
    let mut db = DMatrix::zeros(n2, d);
    let da_s = &dz * &b_t;
    let db_t = dz.tr_mul(&a_s);
    for (r, &s) in sources.iter().enumerate() {
        for c in 0..d {
            da[(s, c)] += da_s[(r, c)];
        }
    }
    for (r, &t) in targets.iter().enumerate() {
        for c in 0..d {
            db[(t, c)] += db_t[(r, c)];
        }
    }

    let mut ls = 0.0;
    if config.uses_regularizer() {
        let lambda = config.lambda;
        match config.regularizer {
            Regularizer::Dirichlet => {
                let (w1, w2) = match (shape1.stiffness, shape2.stiffness) {
                    (Some(w1), Some(w2)) => (w1, w2),
                    _ => {
                        return Err(Error::InvalidArgument(
                            "Dirichlet regularizer needs both stiffness matrices".into(),
                        ))
                    }
                };
                let (l, d1, d2) = dirichlet_loss(&a, w1, &b, w2)?;
                ls = l;
                da += d1 * lambda;
                db += d2 * lambda;
            }
            Regularizer::Spectral => {
                let (b1, b2) = match (shape1.basis, shape2.basis) {
                    (Some(b1), Some(b2)) => (b1, b2),
                    _ => {
                        return Err(Error::InvalidArgument(
                            "spectral regularizer needs both bases".into(),
                        ))
                    }
                };
                let k = config.k.min(b1.k()).min(b2.k());
                let (b1, b2) = (b1.truncated(k)?, b2.truncated(k)?);
                let pi = softmax_logits(&a, &b, config.tau);
                let (l, dpi) = spectral_loss_with(&DenseProducts, &pi, &b1, &b2, gt)?;
                ls = l;
                let dz = softmax_backward(&pi, &dpi) * (lambda / config.tau);
                da += &dz * &b;
                db += dz.tr_mul(&a);
            }
            Regularizer::None => unreachable!(),
        }
    }
    let total = if config.uses_regularizer() {
        lc + config.lambda * ls
    } else {
        lc
    };
    Ok(LossOutput {
        total,
        contrastive: lc,
        regularizer: ls,
        dg1: l2_normalize_backward(&a, &na, &da),
        dg2: l2_normalize_backward(&b, &nb, &db),
    })
}
