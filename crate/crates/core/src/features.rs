//! Differentiable per-vertex feature head.
//!
//! Each block diffuses every input channel with its own learnable time, then runs
//! a pointwise MLP on `[x, diffused x]`. Gradients are computed by a hand-written
//! reverse pass over a tape recorded during the forward pass; the eigenbasis is a
//! constant.

use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fsutil::{self, LeReader, LeWriter};
use crate::mesh::TriangleMesh;
use crate::optim::AdamState;
use crate::rng::substream;
use crate::spectral::{scale_rows, SpectralBasis};

/// Initial diffusion time of every channel.
pub const INITIAL_DIFFUSION_TIME: f64 = 1e-2;

/// `n×d` features, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(DMatrix<f64>);

impl FeatureMatrix {
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        if g.ncols() == 0 || g.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "feature matrix must be nonempty, got {}x{}",
                g.nrows(),
                g.ncols()
            )));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite feature at row {}",
                i % g.nrows()
            )));
        }
        Ok(Self(g))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    /// Mean over columns of the Dirichlet energy `gᵀWg`.
    pub fn mean_dirichlet_energy(&self, w: &crate::operators::StiffnessMatrix) -> Result<f64> {
        let wg = w.csr().mul_dense(&self.0)?;
        Ok(self.0.component_mul(&wg).sum() / self.d() as f64)
    }
}

/// Scales every row to unit Euclidean norm; a zero row is an error.
pub fn l2_normalize_rows(g: &FeatureMatrix) -> Result<FeatureMatrix> {
    let (out, _) = normalize_with_norms(g.matrix())?;
    Ok(FeatureMatrix(out))
}

pub(crate) fn normalize_with_norms(g: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut out = g.clone();
    let mut norms = Vec::with_capacity(g.nrows());
    for i in 0..g.nrows() {
        let nrm = g.row(i).norm();
        if !(nrm > 0.0) || !nrm.is_finite() {
            return Err(Error::Numerical(format!("feature row {i} has norm {nrm}")));
        }
        out.row_mut(i).unscale_mut(nrm);
        norms.push(nrm);
    }
    Ok((out, norms))
}

/// Pulls a gradient w.r.t. normalized rows `ĝ = g/‖g‖` back to `g`:
/// `(dĝ − ĝ (ĝ·dĝ)) / ‖g‖`.
pub fn l2_normalize_backward(
    normalized: &DMatrix<f64>,
    norms: &[f64],
    upstream: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = upstream.clone();
    for i in 0..out.nrows() {
        let dot = normalized.row(i).dot(&upstream.row(i));
        for j in 0..out.ncols() {
            out[(i, j)] = (upstream[(i, j)] - normalized[(i, j)] * dot) / norms[i];
        }
    }
    out
}

/// `HKS(v, t) = Σᵢ exp(−λᵢ t) φᵢ(v)²`, one column per time.
pub fn heat_kernel_signature(basis: &SpectralBasis, times: &[f64]) -> Result<DMatrix<f64>> {
    if let Some(t) = times.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "HKS time {t} must be positive"
        )));
    }
    let phi = basis.phi();
    Ok(DMatrix::from_fn(basis.n(), times.len(), |v, c| {
        basis
            .eigenvalues()
            .iter()
            .enumerate()
            .map(|(i, lam)| (-lam * times[c]).exp() * phi[(v, i)] * phi[(v, i)])
            .sum()
    }))
}

/// Input signal of a mesh: xyz centered on the area-weighted centroid, followed
/// by HKS channels for `hks_times`.
pub fn input_signals(
    mesh: &TriangleMesh,
    basis: Option<&SpectralBasis>,
    hks_times: &[f64],
) -> Result<DMatrix<f64>> {
    let areas = mesh.vertex_areas();
    let total: f64 = areas.iter().sum();
    let mut c = [0.0; 3];
    for (p, a) in mesh.vertices().iter().zip(&areas) {
        for k in 0..3 {
            c[k] += p[k] * a / total;
        }
    }
    let n = mesh.n_vertices();
    let mut x = DMatrix::zeros(n, 3 + hks_times.len());
    for (v, p) in mesh.vertices().iter().enumerate() {
        for k in 0..3 {
            x[(v, k)] = p[k] - c[k];
        }
    }
    if !hks_times.is_empty() {
        let basis = basis
            .ok_or_else(|| Error::InvalidArgument("HKS inputs need a spectral basis".into()))?;
        let hks = heat_kernel_signature(basis, hks_times)?;
        x.columns_mut(3, hks_times.len()).copy_from(&hks);
    }
    Ok(x)
}

/// Shape of the feature head.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub n_blocks: usize,
    /// Per-block spectral diffusion; off for pointwise-only heads.
    pub diffusion: bool,
    /// Basis size the diffusion was trained with.
    pub k: usize,
    /// HKS input channels after xyz (empty for xyz only).
    pub hks_times: Vec<f64>,
}

impl Architecture {
    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.n_blocks == 0 {
            return Err(Error::InvalidArgument(
                "in_dim, out_dim and n_blocks must be >= 1".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        if self.diffusion && self.k == 0 {
            return Err(Error::InvalidArgument(
                "diffusion blocks need k >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Width between blocks.
    fn block_width(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.in_dim)
    }

    /// `(input width, output width)` of block `b`.
    fn block_io(&self, b: usize) -> (usize, usize) {
        let inp = if b == 0 {
            self.in_dim
        } else {
            self.block_width()
        };
        let out = if b + 1 == self.n_blocks {
            self.out_dim
        } else {
            self.block_width()
        };
        (inp, out)
    }

    fn layer_dims(&self, b: usize) -> Vec<(usize, usize)> {
        let (inp, out) = self.block_io(b);
        let mut widths = vec![if self.diffusion { 2 * inp } else { inp }];
        widths.extend(&self.hidden_dims);
        widths.push(out);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        (0..self.n_blocks)
            .map(|b| {
                let times = if self.diffusion {
                    self.block_io(b).0
                } else {
                    0
                };
                times
                    + self
                        .layer_dims(b)
                        .iter()
                        .map(|(i, o)| i * o + o)
                        .sum::<usize>()
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `in × out`.
    pub w: DMatrix<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Log diffusion time per input channel (empty without diffusion).
    pub log_times: Vec<f64>,
    pub layers: Vec<Layer>,
}

/// Parameters Θ of the feature head. Flat order per block: log-times, then each
/// layer's weights (row-major `in × out`) and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    blocks: Vec<Block>,
}

/// `∂L/∂Θ`, shape-congruent with [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle(ModelParams);

impl GradientBundle {
    pub fn to_flat(&self) -> Vec<f64> {
        self.0.to_flat()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.0.blocks
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        let mut flat = self.to_flat();
        for (a, b) in flat.iter_mut().zip(other.to_flat()) {
            *a += b;
        }
        self.0.set_flat(&flat).expect("same shape");
    }
}

impl ModelParams {
    /// Deterministic initialization: weights `N(0, 1)/√fan_in`, zero biases, all
    /// diffusion times [`INITIAL_DIFFUSION_TIME`].
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = substream(seed, "init");
        let mut blocks = Vec::with_capacity(arch.n_blocks);
        for b in 0..arch.n_blocks {
            let (inp, _) = arch.block_io(b);
            let log_times = if arch.diffusion {
                vec![INITIAL_DIFFUSION_TIME.ln(); inp]
            } else {
                Vec::new()
            };
            let layers = arch
                .layer_dims(b)
                .into_iter()
                .map(|(i, o)| {
                    let s = 1.0 / (i as f64).sqrt();
                    Layer {
                        w: DMatrix::from_fn(i, o, |_, _| {
                            s * <StandardNormal as Distribution<f64>>::sample(
                                &StandardNormal,
                                &mut rng,
                            )
                        }),
                        b: vec![0.0; o],
                    }
                })
                .collect();
            blocks.push(Block { log_times, layers });
        }
        Ok(Self { arch, blocks })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn zeros_like(&self) -> GradientBundle {
        let mut z = self.clone();
        z.set_flat(&vec![0.0; self.arch.param_count()]).unwrap();
        GradientBundle(z)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for blk in &self.blocks {
            out.extend(&blk.log_times);
            for l in &blk.layers {
                for i in 0..l.w.nrows() {
                    out.extend(l.w.row(i).iter());
                }
                out.extend(&l.b);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.arch.param_count() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.arch.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for blk in &mut self.blocks {
            for t in blk.log_times.iter_mut() {
                *t = it.next().unwrap();
            }
            for l in &mut blk.layers {
                for i in 0..l.w.nrows() {
                    for j in 0..l.w.ncols() {
                        l.w[(i, j)] = it.next().unwrap();
                    }
                }
                for b in l.b.iter_mut() {
                    *b = it.next().unwrap();
                }
            }
        }
        Ok(())
    }

    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self> {
        let mut p = Self::init(arch, 0)?;
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * logistic(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = logistic(z);
    s + z * s * (1.0 - s)
}

struct LayerTape {
    input: DMatrix<f64>,
    pre: DMatrix<f64>,
    activated: bool,
}

struct BlockTape {
    in_width: usize,
    /// `Φᵀ A x` before the per-time decay.
    coef: Option<DMatrix<f64>>,
    layers: Vec<LayerTape>,
}

/// Intermediate values of one forward pass.
pub struct Tape {
    blocks: Vec<BlockTape>,
}

fn check_inputs(
    params: &ModelParams,
    inputs: &DMatrix<f64>,
    basis: Option<&SpectralBasis>,
) -> Result<()> {
    let arch = &params.arch;
    if inputs.ncols() != arch.in_dim {
        return Err(Error::Dimension(format!(
            "{} input channels, model expects {}",
            inputs.ncols(),
            arch.in_dim
        )));
    }
    if arch.diffusion {
        let basis = basis.ok_or_else(|| {
            Error::InvalidArgument("diffusion blocks need a spectral basis".into())
        })?;
        if basis.n() != inputs.nrows() {
            return Err(Error::Dimension(format!(
                "{} input rows, basis has {}",
                inputs.nrows(),
                basis.n()
            )));
        }
    }
    Ok(())
}

fn decay(basis: &SpectralBasis, log_times: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(basis.k(), log_times.len(), |i, j| {
        (-basis.eigenvalues()[i] * log_times[j].exp()).exp()
    })
}

fn add_bias(z: &mut DMatrix<f64>, b: &[f64]) {
    for j in 0..z.ncols() {
        for v in z.column_mut(j).iter_mut() {
            *v += b[j];
        }
    }
}

/// Applies the head; `basis` may be `None` only for heads without diffusion.
pub fn forward(
    params: &ModelParams,
    inputs: &DMatrix<f64>,
    basis: Option<&SpectralBasis>,
) -> Result<FeatureMatrix> {
    let (g, _) = forward_with_tape(params, inputs, basis)?;
    FeatureMatrix::new(g)
}

pub fn forward_with_tape(
    params: &ModelParams,
    inputs: &DMatrix<f64>,
    basis: Option<&SpectralBasis>,
) -> Result<(DMatrix<f64>, Tape)> {
    check_inputs(params, inputs, basis)?;
    let n_blocks = params.blocks.len();
    let mut x = inputs.clone();
    let mut tapes = Vec::with_capacity(n_blocks);
    for (bi, blk) in params.blocks.iter().enumerate() {
        let in_width = x.ncols();
        let (mut h, coef) = if params.arch.diffusion {
            let basis = basis.expect("checked");
            let coef = basis.analyze(&x)?;
            let diffused = basis.synthesize(&coef.component_mul(&decay(basis, &blk.log_times)));
            let mut cat = DMatrix::zeros(x.nrows(), 2 * in_width);
            cat.columns_mut(0, in_width).copy_from(&x);
            cat.columns_mut(in_width, in_width).copy_from(&diffused);
            (cat, Some(coef))
        } else {
            (x, None)
        };
        let mut layer_tapes = Vec::with_capacity(blk.layers.len());
        for (li, layer) in blk.layers.iter().enumerate() {
            let mut z = &h * &layer.w;
            add_bias(&mut z, &layer.b);
            let activated = !(bi + 1 == n_blocks && li + 1 == blk.layers.len());
            let out = if activated { z.map(silu) } else { z.clone() };
            layer_tapes.push(LayerTape {
                input: h,
                pre: z,
                activated,
            });
            h = out;
        }
        tapes.push(BlockTape {
            in_width,
            coef,
            layers: layer_tapes,
        });
        x = h;
    }
    Ok((x, Tape { blocks: tapes }))
}

/// Reverse pass: `∂L/∂Θ` given `∂L/∂G`.
pub fn backward(
    params: &ModelParams,
    inputs: &DMatrix<f64>,
    basis: Option<&SpectralBasis>,
    upstream: &DMatrix<f64>,
) -> Result<GradientBundle> {
    let (g, tape) = forward_with_tape(params, inputs, basis)?;
    if upstream.shape() != g.shape() {
        return Err(Error::Dimension(format!(
            "upstream gradient is {:?}, features are {:?}",
            upstream.shape(),
            g.shape()
        )));
    }
    backward_from_tape(params, &tape, basis, upstream)
}

pub fn backward_from_tape(
    params: &ModelParams,
    tape: &Tape,
    basis: Option<&SpectralBasis>,
    upstream: &DMatrix<f64>,
) -> Result<GradientBundle> {
    let mut grad = params.zeros_like();
    let mut dx = upstream.clone();
    for (bi, (blk, bt)) in params.blocks.iter().zip(&tape.blocks).enumerate().rev() {
        let gblk = &mut grad.0.blocks[bi];
        let mut dh = dx;
        for (li, (layer, lt)) in blk.layers.iter().zip(&bt.layers).enumerate().rev() {
            let dz = if lt.activated {
                dh.zip_map(&lt.pre, |d, z| d * silu_grad(z))
            } else {
                dh
            };
            gblk.layers[li].w = lt.input.tr_mul(&dz);
            gblk.layers[li].b = (0..dz.ncols()).map(|j| dz.column(j).sum()).collect();
            dh = &dz * layer.w.transpose();
        }
        dx = if let Some(coef) = &bt.coef {
            let basis = basis.expect("diffusion tape without basis");
            let c = bt.in_width;
            let mut d_in = dh.columns(0, c).into_owned();
            let d_diff = dh.columns(c, c).into_owned();
            let e = decay(basis, &blk.log_times);
            let p = basis.phi().tr_mul(&d_diff);
            let dcoef = p.component_mul(&e);
            d_in += scale_rows(&(basis.phi() * dcoef), basis.mass());
            for j in 0..c {
                let t = blk.log_times[j].exp();
                let dt: f64 = (0..basis.k())
                    .map(|i| -basis.eigenvalues()[i] * p[(i, j)] * coef[(i, j)] * e[(i, j)])
                    .sum();
                gblk.log_times[j] = dt * t;
            }
            d_in
        } else {
            dh
        };
    }
    Ok(grad)
}

/// A saved model and the optimizer position it was saved at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub epoch: u64,
    pub optimizer: Option<AdamState>,
}

const CKPT_MAGIC: &[u8; 4] = b"SCMP";
const CKPT_VERSION: u8 = 1;

impl Checkpoint {
    /// `SCMP` container: magic, version, architecture, flat parameters, epoch,
    /// optional Adam step and moments. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.params.arch;
        let mut w = LeWriter::default();
        w.bytes(CKPT_MAGIC);
        w.u8(CKPT_VERSION);
        w.u32(a.in_dim as u32);
        w.u32(a.out_dim as u32);
        w.u32(a.n_blocks as u32);
        w.u8(a.diffusion as u8);
        w.u32(a.k as u32);
        w.u32(a.hidden_dims.len() as u32);
        for &h in &a.hidden_dims {
            w.u32(h as u32);
        }
        w.u32(a.hks_times.len() as u32);
        for &t in &a.hks_times {
            w.f64(t);
        }
        let flat = self.params.to_flat();
        w.u64(flat.len() as u64);
        for v in flat {
            w.f64(v);
        }
        w.u64(self.epoch);
        match &self.optimizer {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u64(s.step);
                for v in s.m.iter().chain(&s.v) {
                    w.f64(*v);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        r.expect_magic(CKPT_MAGIC)?;
        let version = r.u8()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported SCMP version {version}")));
        }
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let n_blocks = r.u32()? as usize;
        let diffusion = r.u8()? != 0;
        let k = r.u32()? as usize;
        let nh = r.u32()? as usize;
        let hidden_dims = (0..nh)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let nt = r.u32()? as usize;
        let hks_times = (0..nt).map(|_| r.f64()).collect::<Result<_>>()?;
        let arch = Architecture {
            in_dim,
            hidden_dims,
            out_dim,
            n_blocks,
            diffusion,
            k,
            hks_times,
        };
        arch.validate()
            .map_err(|e| Error::Format(format!("bad architecture: {e}")))?;
        let count = r.u64()? as usize;
        if count != arch.param_count() {
            return Err(Error::Format(format!(
                "{count} parameters stored, architecture has {}",
                arch.param_count()
            )));
        }
        let flat = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let epoch = r.u64()?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step, m, v })
            }
            t => return Err(Error::Format(format!("bad optimizer tag {t}"))),
        };
        if !r.is_at_end() {
            return Err(Error::Format("trailing bytes after SCMP payload".into()));
        }
        Ok(Self {
            params: ModelParams::from_flat(arch, &flat)?,
            epoch,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }
}
