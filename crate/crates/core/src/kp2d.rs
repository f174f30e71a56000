//! Keypoint graph matching in the plane.
//!
//! Keypoints are triangulated (Delaunay), given the same cotangent operators as
//! surfaces, and matched with the loss stack used for meshes on top of a
//! pointwise MLP over precomputed node descriptors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use robust::{incircle, orient2d, Coord};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::hits_at_1;
use crate::features::{self, Architecture, FeatureMatrix, ModelParams};
use crate::fsutil;
use crate::linalg::CsrMatrix;
use crate::losses::{combined_loss, CorrespondenceSet, LossConfig, Regularizer, ShapeTerms};
use crate::matching::{build_index, nearest_neighbor_map, PointMap};
use crate::mesh::TriangleMesh;
use crate::operators::{MassMatrix, Operators, StiffnessMatrix};
use crate::optim::{Adam, AdamState};
use crate::rng::substream;
use crate::spectral::{eigenbasis_with, EigenMethod, SpectralBasis};
use crate::synth::Split;

pub type Point2 = [f64; 2];

/// Smoothness weight used for keypoint graphs.
pub const DEFAULT_LAMBDA_2D: f64 = 0.01;
/// Half-width of the uniform jitter applied to duplicate points.
pub const DUPLICATE_JITTER: f64 = 1e-6;
const MAX_FLIPS_PER_POINT: usize = 200;

fn coord(p: Point2) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

/// Output of [`delaunay`].
#[derive(Clone, Debug, PartialEq)]
pub struct Triangulation {
    /// Input points after duplicate jitter.
    pub points: Vec<Point2>,
    /// Counter-clockwise faces; empty when fewer than three non-collinear points.
    pub faces: Vec<[usize; 3]>,
    /// All points collinear (with at least three of them): no faces, chain graph.
    pub degenerate: bool,
}

fn jitter_duplicates(points: &[Point2], seed: u64) -> Vec<Point2> {
    let mut pts = points.to_vec();
    let mut rng = substream(seed, "kp2d/jitter");
    loop {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by(|&a, &b| pts[a].partial_cmp(&pts[b]).unwrap().then(a.cmp(&b)));
        let mut moved = false;
        for w in order.windows(2) {
            if pts[w[0]] == pts[w[1]] {
                let j = w[1];
                pts[j][0] += rng.random_range(-DUPLICATE_JITTER..DUPLICATE_JITTER);
                pts[j][1] += rng.random_range(-DUPLICATE_JITTER..DUPLICATE_JITTER);
                moved = true;
            }
        }
        if !moved {
            return pts;
        }
    }
}

/// Delaunay triangulation by a sorted sweep with Lawson flips.
///
/// Diagonals of cocircular quadrilaterals go to the lexicographically lowest
/// index pair, so the result is deterministic.
pub fn delaunay(points: &[Point2], seed: u64) -> Result<Triangulation> {
    if let Some(i) = points
        .iter()
        .position(|p| !p[0].is_finite() || !p[1].is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "keypoint {i} is not finite"
        )));
    }
    let pts = jitter_duplicates(points, seed);
    let n = pts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pts[a].partial_cmp(&pts[b]).unwrap().then(a.cmp(&b)));
    let first = if n >= 3 {
        (2..n).find(|&i| {
            orient2d(
                coord(pts[order[0]]),
                coord(pts[order[1]]),
                coord(pts[order[i]]),
            ) != 0.0
        })
    } else {
        None
    };
    let Some(first) = first else {
        return Ok(Triangulation {
            points: pts,
            faces: Vec::new(),
            degenerate: n >= 3,
        });
    };

    let mut tri = Builder::new(&pts);
    // fan from the first off-line point over the collinear prefix
    let apex = order[first];
    let apex_left = orient2d(coord(pts[order[0]]), coord(pts[order[1]]), coord(pts[apex])) > 0.0;
    for w in order[..first].windows(2) {
        if apex_left {
            tri.add_ccw(w[0], w[1], apex);
        } else {
            tri.add_ccw(w[1], w[0], apex);
        }
    }
    // counter-clockwise hull
    let mut hull: Vec<usize> = if apex_left {
        let mut h: Vec<usize> = order[..first].to_vec();
        h.push(apex);
        h
    } else {
        let mut h: Vec<usize> = order[..first].iter().rev().copied().collect();
        h.push(apex);
        h
    };
    let mut stack: Vec<(usize, usize)> = tri
        .faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .collect();
    tri.legalize(&mut stack, MAX_FLIPS_PER_POINT * n);

    for &p in &order[first + 1..] {
        let h = hull.len();
        let visible: Vec<bool> = (0..h)
            .map(|i| {
                orient2d(
                    coord(pts[hull[i]]),
                    coord(pts[hull[(i + 1) % h]]),
                    coord(pts[p]),
                ) < 0.0
            })
            .collect();
        // visible edges form one contiguous run on the hull
        let start = (0..h)
            .find(|&i| visible[i] && !visible[(i + h - 1) % h])
            .ok_or_else(|| Error::Numerical("sweep point sees no hull edge".into()))?;
        let mut run = Vec::new();
        let mut i = start;
        while visible[i] {
            run.push(i);
            i = (i + 1) % h;
        }
        let mut stack = Vec::new();
        for &e in &run {
            let (a, b) = (hull[e], hull[(e + 1) % h]);
            tri.add_ccw(b, a, p);
            stack.push((a, b));
        }
        let keep_from = (start + run.len()) % h;
        let mut next = Vec::with_capacity(h + 1);
        let mut j = keep_from;
        loop {
            next.push(hull[j]);
            if j == start {
                break;
            }
            j = (j + 1) % h;
        }
        next.push(p);
        hull = next;
        tri.legalize(&mut stack, MAX_FLIPS_PER_POINT * n);
    }
    let mut faces = tri.faces;
    faces.iter_mut().for_each(canonical_rotation);
    faces.sort_unstable();
    Ok(Triangulation {
        points: pts,
        faces,
        degenerate: false,
    })
}

fn canonical_rotation(f: &mut [usize; 3]) {
    let m = (0..3).min_by_key(|&i| f[i]).unwrap();
    f.rotate_left(m);
}

struct Builder<'a> {
    pts: &'a [Point2],
    faces: Vec<[usize; 3]>,
    /// Directed edge → face containing it.
    edges: HashMap<(usize, usize), usize>,
}

impl<'a> Builder<'a> {
    fn new(pts: &'a [Point2]) -> Self {
        Self {
            pts,
            faces: Vec::new(),
            edges: HashMap::new(),
        }
    }

    fn add_ccw(&mut self, a: usize, b: usize, c: usize) {
        let idx = self.faces.len();
        self.faces.push([a, b, c]);
        self.register(idx);
    }

    fn register(&mut self, idx: usize) {
        let [a, b, c] = self.faces[idx];
        for e in [(a, b), (b, c), (c, a)] {
            self.edges.insert(e, idx);
        }
    }

    fn unregister(&mut self, idx: usize) {
        let [a, b, c] = self.faces[idx];
        for e in [(a, b), (b, c), (c, a)] {
            self.edges.remove(&e);
        }
    }

    fn third(&self, idx: usize, a: usize, b: usize) -> usize {
        self.faces[idx]
            .into_iter()
            .find(|&v| v != a && v != b)
            .unwrap()
    }

    /// Lawson flips until every queued edge is locally Delaunay.
    fn legalize(&mut self, stack: &mut Vec<(usize, usize)>, cap: usize) {
        let mut flips = 0;
        while let Some((a, b)) = stack.pop() {
            let (Some(&t1), Some(&t2)) = (self.edges.get(&(a, b)), self.edges.get(&(b, a))) else {
                continue;
            };
            let c = self.third(t1, a, b);
            let d = self.third(t2, a, b);
            let ic = incircle(
                coord(self.pts[a]),
                coord(self.pts[b]),
                coord(self.pts[c]),
                coord(self.pts[d]),
            );
            let key = |x: usize, y: usize| (x.min(y), x.max(y));
            let flip = ic > 0.0 || (ic == 0.0 && key(c, d) < key(a, b));
            if !flip || flips >= cap {
                continue;
            }
            flips += 1;
            self.unregister(t1);
            self.unregister(t2);
            self.faces[t1] = [a, d, c];
            self.faces[t2] = [d, b, c];
            self.register(t1);
            self.register(t2);
            stack.extend([(a, d), (d, b), (b, c), (c, a)]);
        }
    }
}

/// Keypoints with their triangulation and node descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointGraph {
    pub points: Vec<Point2>,
    pub faces: Vec<[usize; 3]>,
    pub signals: DMatrix<f64>,
    pub degenerate: bool,
}

impl KeypointGraph {
    pub fn new(points: Vec<Point2>, signals: DMatrix<f64>, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument(
                "keypoint graph needs at least one node".into(),
            ));
        }
        if signals.nrows() != points.len() {
            return Err(Error::Dimension(format!(
                "{} descriptor rows for {} keypoints",
                signals.nrows(),
                points.len()
            )));
        }
        let t = delaunay(&points, seed)?;
        Ok(Self {
            points: t.points,
            faces: t.faces,
            signals,
            degenerate: t.degenerate,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Chain through the points in lexicographic order: combinatorial Laplacian, unit masses.
fn chain_laplacian(points: &[Point2]) -> Result<(StiffnessMatrix, MassMatrix)> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].partial_cmp(&points[b]).unwrap().then(a.cmp(&b)));
    let mut t = Vec::new();
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        t.extend([(a, b, -1.0), (b, a, -1.0), (a, a, 1.0), (b, b, 1.0)]);
    }
    if n == 1 {
        t.push((0, 0, 0.0));
    }
    Ok((
        StiffnessMatrix::from_csr(CsrMatrix::from_triplets(n, n, &t)?)?,
        MassMatrix::from_diagonal(vec![1.0; n])?,
    ))
}

/// Cotangent stiffness and lumped mass of the planar triangulation (as a mesh at
/// z = 0). Graphs without faces use the chain fallback.
pub fn planar_laplacian(graph: &KeypointGraph) -> Result<(StiffnessMatrix, MassMatrix)> {
    if graph.faces.is_empty() {
        return chain_laplacian(&graph.points);
    }
    let mesh = TriangleMesh::new(
        graph.points.iter().map(|p| [p[0], p[1], 0.0]).collect(),
        graph.faces.clone(),
        "keypoints",
    )?;
    let ops = Operators::from_mesh(&mesh)?;
    Ok((ops.stiffness, ops.mass))
}

/// Two graphs of the same object with a node correspondence `a → b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphPair {
    pub a: KeypointGraph,
    pub b: KeypointGraph,
    pub gt: PointMap,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct GraphPairFile {
    points_a: Vec<f64>,
    points_b: Vec<f64>,
    signals_a: Vec<f64>,
    signals_b: Vec<f64>,
    gt: Vec<usize>,
}

fn unflatten_points(flat: &[f64], what: &str) -> Result<Vec<Point2>> {
    if !flat.len().is_multiple_of(2) {
        return Err(Error::Format(format!("{what}: odd number of coordinates")));
    }
    Ok(flat.chunks(2).map(|c| [c[0], c[1]]).collect())
}

fn unflatten_signals(flat: &[f64], rows: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows == 0 || !flat.len().is_multiple_of(rows) {
        return Err(Error::Format(format!(
            "{what}: {} values do not split into {rows} rows",
            flat.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, flat.len() / rows, flat))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>())
        .collect()
}

impl GraphPair {
    pub fn new(a: KeypointGraph, b: KeypointGraph, gt: PointMap) -> Result<Self> {
        if gt.len() != a.len() {
            return Err(Error::Dimension(format!(
                "ground truth has {} entries for {} source nodes",
                gt.len(),
                a.len()
            )));
        }
        gt.check_range(b.len())?;
        if a.signals.ncols() != b.signals.ncols() {
            return Err(Error::Dimension("descriptor widths differ".into()));
        }
        Ok(Self { a, b, gt })
    }

    /// JSON with `pointsA`, `pointsB`, `signalsA`, `signalsB` (row-major) and `gt`.
    pub fn to_json(&self) -> String {
        let f = GraphPairFile {
            points_a: self.a.points.iter().flatten().copied().collect(),
            points_b: self.b.points.iter().flatten().copied().collect(),
            signals_a: row_major(&self.a.signals),
            signals_b: row_major(&self.b.signals),
            gt: self.gt.targets().to_vec(),
        };
        serde_json::to_string(&f).expect("graph pair serializes")
    }

    pub fn from_json(text: &str, seed: u64) -> Result<Self> {
        let f: GraphPairFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("graph pair: {e}")))?;
        let pa = unflatten_points(&f.points_a, "pointsA")?;
        let pb = unflatten_points(&f.points_b, "pointsB")?;
        let sa = unflatten_signals(&f.signals_a, pa.len(), "signalsA")?;
        let sb = unflatten_signals(&f.signals_b, pb.len(), "signalsB")?;
        Self::new(
            KeypointGraph::new(pa, sa, seed)?,
            KeypointGraph::new(pb, sb, seed)?,
            PointMap::from_vec(f.gt),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fsutil::read_string(path)?, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphManifestEntry {
    pub file: PathBuf,
    pub split: Split,
}

/// List of graph-pair files; paths relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub pairs: Vec<GraphManifestEntry>,
}

impl GraphManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        fsutil::write_atomic(path, s.as_bytes())
    }

    /// Loads the manifest and every pair of `split`.
    pub fn load_split(path: &Path, split: Split) -> Result<Vec<GraphPair>> {
        let m: GraphManifest = serde_json::from_str(&fsutil::read_string(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(""));
        m.pairs
            .iter()
            .filter(|e| e.split == split)
            .map(|e| GraphPair::load(&root.join(&e.file)))
            .collect()
    }
}

/// Synthetic keypoint benchmark: a category with fixed keypoint types, each with
/// a template position and an embedding. Graphs show a random subset of types
/// under a random similarity transform; descriptors are the noisy embedding plus
/// a positional encoding. The second graph of a pair is an independently noised,
/// shuffled view of the same subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub n_types: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub embedding_dim: usize,
    pub frequencies: usize,
    /// Descriptor noise standard deviation (embeddings have unit variance).
    pub descriptor_noise: f64,
    /// Position noise as a fraction of the image size.
    pub position_noise: f64,
    /// Image size in pixels.
    pub image_size: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_types: 19,
            min_nodes: 5,
            max_nodes: 19,
            embedding_dim: 16,
            frequencies: 2,
            descriptor_noise: 0.8,
            position_noise: 0.03,
            image_size: 256.0,
        }
    }
}

impl BenchmarkConfig {
    pub fn signal_dim(&self) -> usize {
        self.embedding_dim + 4 * self.frequencies
    }

    fn validate(&self) -> Result<()> {
        if self.min_nodes < 1 || self.min_nodes > self.max_nodes || self.max_nodes > self.n_types {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= min_nodes <= max_nodes <= n_types, got {} / {} / {}",
                self.min_nodes, self.max_nodes, self.n_types
            )));
        }
        if self.embedding_dim == 0
            || !(self.descriptor_noise >= 0.0)
            || !(self.position_noise >= 0.0)
        {
            return Err(Error::InvalidArgument(
                "bad benchmark noise or width".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed per-benchmark category: template positions in the unit square and embeddings.
struct Category {
    positions: Vec<Point2>,
    embeddings: DMatrix<f64>,
}

fn category(cfg: &BenchmarkConfig, seed: u64) -> Category {
    let mut rng = substream(seed, "kp2d/category");
    let positions = (0..cfg.n_types)
        .map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
        .collect();
    let embeddings = DMatrix::from_fn(cfg.n_types, cfg.embedding_dim, |_, _| {
        StandardNormal.sample(&mut rng)
    });
    Category {
        positions,
        embeddings,
    }
}

fn view(
    cfg: &BenchmarkConfig,
    cat: &Category,
    types: &[usize],
    rng: &mut impl Rng,
) -> Result<KeypointGraph> {
    let theta: f64 = rng.random_range(-0.3..0.3);
    let scale: f64 = rng.random_range(0.8..1.2);
    let shift = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let (c, s) = (theta.cos(), theta.sin());
    let jitter = Normal::new(0.0, cfg.position_noise).unwrap();
    let points: Vec<Point2> = types
        .iter()
        .map(|&t| {
            let [x, y] = cat.positions[t];
            let (x, y) = (x - 0.5, y - 0.5);
            let px = scale * (c * x - s * y) + 0.5 + shift[0] + jitter.sample(rng);
            let py = scale * (s * x + c * y) + 0.5 + shift[1] + jitter.sample(rng);
            [px * cfg.image_size, py * cfg.image_size]
        })
        .collect();
    let enc = positional_encoding(&points, cfg.frequencies);
    let e = cfg.embedding_dim;
    let signals = DMatrix::from_fn(types.len(), cfg.signal_dim(), |i, j| {
        if j < e {
            cat.embeddings[(types[i], j)]
                + cfg.descriptor_noise
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        } else {
            enc[(i, j - e)]
        }
    });
    KeypointGraph::new(points, signals, 0)
}

/// `sin`/`cos` of the centered, RMS-normalized coordinates at `2^f π`.
pub fn positional_encoding(points: &[Point2], frequencies: usize) -> DMatrix<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let rms = (points
        .iter()
        .map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let rms = if rms > 0.0 { rms } else { 1.0 };
    DMatrix::from_fn(points.len(), 4 * frequencies, |i, j| {
        let f = j / 4;
        let w = (1u64 << f) as f64 * std::f64::consts::PI * 0.5;
        let x = (points[i][0] - cx) / rms;
        let y = (points[i][1] - cy) / rms;
        match j % 4 {
            0 => (w * x).sin(),
            1 => (w * x).cos(),
            2 => (w * y).sin(),
            _ => (w * y).cos(),
        }
    })
}

/// `count` pairs from the benchmark with root `seed`; pair `i` uses its own substream.
pub fn generate_benchmark(
    cfg: &BenchmarkConfig,
    seed: u64,
    offset: usize,
    count: usize,
) -> Result<Vec<GraphPair>> {
    cfg.validate()?;
    let cat = category(cfg, seed);
    (offset..offset + count)
        .map(|i| {
            let mut rng = substream(seed, &format!("kp2d/pair/{i}"));
            let m = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
            let mut all: Vec<usize> = (0..cfg.n_types).collect();
            all.shuffle(&mut rng);
            let types: Vec<usize> = all[..m].to_vec();
            let a = view(cfg, &cat, &types, &mut rng)?;
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut rng);
            let types_b: Vec<usize> = perm.iter().map(|&p| types[p]).collect();
            let b = view(cfg, &cat, &types_b, &mut rng)?;
            // node i of A has type types[i], which sits at position perm⁻¹(i) in B
            let mut gt = vec![0; m];
            for (j, &p) in perm.iter().enumerate() {
                gt[p] = j;
            }
            GraphPair::new(a, b, PointMap::new(gt, m)?)
        })
        .collect()
}

/// Hyperparameters of the keypoint feature head and its training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig2d {
    pub loss: LossConfig,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig2d {
    fn default() -> Self {
        Self {
            loss: LossConfig {
                lambda: DEFAULT_LAMBDA_2D,
                ..LossConfig::default()
            },
            hidden_dims: vec![64],
            out_dim: 32,
            epochs: 10,
            lr: crate::optim::DEFAULT_LEARNING_RATE,
            seed: 0,
        }
    }
}

/// Regularizer operators of one graph.
struct GraphTerms {
    stiffness: StiffnessMatrix,
    basis: Option<SpectralBasis>,
}

fn graph_terms(g: &KeypointGraph, config: &LossConfig) -> Result<GraphTerms> {
    let (w, a) = planar_laplacian(g)?;
    let basis = if config.regularizer == Regularizer::Spectral && g.len() >= 2 {
        let k = config.k.min(g.len() - 1);
        Some(eigenbasis_with(&w, &a, k, EigenMethod::Dense)?)
    } else {
        None
    };
    Ok(GraphTerms {
        stiffness: w,
        basis,
    })
}

/// Per-epoch training summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub total: f64,
    pub contrastive: f64,
    pub regularizer: f64,
}

/// Trains a pointwise head on the node descriptors with one pair per step.
pub fn train_2d(
    pairs: &[GraphPair],
    config: &TrainConfig2d,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training graph pairs".into()));
    }
    config.loss.validate()?;
    let in_dim = pairs[0].a.signals.ncols();
    let arch = Architecture {
        in_dim,
        hidden_dims: config.hidden_dims.clone(),
        out_dim: config.out_dim,
        n_blocks: 1,
        diffusion: false,
        k: 0,
        hks_times: Vec::new(),
    };
    let mut params = ModelParams::init(arch, config.seed)?;
    let terms: Vec<(GraphTerms, GraphTerms)> = crate::par::map_slice(pairs, |p| {
        Ok::<_, Error>((
            graph_terms(&p.a, &config.loss)?,
            graph_terms(&p.b, &config.loss)?,
        ))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let adam = Adam::new(config.lr);
    let mut state = AdamState::new(params.architecture().param_count());
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut substream(config.seed, &format!("kp2d/order/{epoch}")));
        let mut sum = EpochLoss {
            total: 0.0,
            contrastive: 0.0,
            regularizer: 0.0,
        };
        for &pi in &order {
            let (p, (ta, tb)) = (&pairs[pi], &terms[pi]);
            let out = pair_loss(&params, p, ta, tb, &config.loss)?;
            if !out.0.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, pair {pi}: L_c = {}, L_s = {}",
                    out.0.contrastive, out.0.regularizer
                )));
            }
            sum.total += out.0.total;
            sum.contrastive += out.0.contrastive;
            sum.regularizer += out.0.regularizer;
            let mut flat = params.to_flat();
            adam.step(&mut flat, &out.1, &mut state)?;
            params.set_flat(&flat)?;
        }
        let n = pairs.len() as f64;
        history.push(EpochLoss {
            total: sum.total / n,
            contrastive: sum.contrastive / n,
            regularizer: sum.regularizer / n,
        });
    }
    Ok((params, history))
}

fn pair_loss(
    params: &ModelParams,
    p: &GraphPair,
    ta: &GraphTerms,
    tb: &GraphTerms,
    config: &LossConfig,
) -> Result<(crate::losses::LossOutput, Vec<f64>)> {
    let (ga, tape_a) = features::forward_with_tape(params, &p.a.signals, None)?;
    let (gb, tape_b) = features::forward_with_tape(params, &p.b.signals, None)?;
    let sample = CorrespondenceSet::from_pointmap(&p.gt);
    let mut cfg = *config;
    if p.a.len() < 2 {
        cfg.lambda = 0.0;
    }
    let out = combined_loss(
        &cfg,
        &FeatureMatrix::new(ga)?,
        &FeatureMatrix::new(gb)?,
        ShapeTerms {
            stiffness: Some(&ta.stiffness),
            basis: ta.basis.as_ref(),
        },
        ShapeTerms {
            stiffness: Some(&tb.stiffness),
            basis: tb.basis.as_ref(),
        },
        &p.gt,
        &sample,
    )?;
    let mut grad = features::backward_from_tape(params, &tape_a, None, &out.dg1)?;
    grad.add_assign(&features::backward_from_tape(
        params, &tape_b, None, &out.dg2,
    )?);
    Ok((out, grad.to_flat()))
}

/// Row-argmax of `Π`, i.e. nearest neighbor between normalized node features.
pub fn match_graphs(
    params: &ModelParams,
    a: &KeypointGraph,
    b: &KeypointGraph,
) -> Result<PointMap> {
    let ga = features::forward(params, &a.signals, None)?;
    let gb = features::forward(params, &b.signals, None)?;
    nearest_neighbor_map(&ga, &build_index(&gb)?)
}

/// Test-set summary of a keypoint model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report2d {
    pub hits_at_1: Vec<f64>,
    pub mean_hits_at_1: f64,
    /// Mean over pairs of `1/m`, the Hits@1 of a random permutation.
    pub random_expectation: f64,
    /// Mean per-column Dirichlet energy of the normalized node features.
    pub mean_dirichlet_energy: f64,
}

pub fn evaluate_2d(params: &ModelParams, pairs: &[GraphPair]) -> Result<Report2d> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation graph pairs".into()));
    }
    let per: Vec<(f64, f64)> = crate::par::map_slice(pairs, |p| {
        let pred = match_graphs(params, &p.a, &p.b)?;
        let h = hits_at_1(&pred, &p.gt)?;
        let mut energy = 0.0;
        for g in [&p.a, &p.b] {
            let (w, _) = planar_laplacian(g)?;
            let f = features::l2_normalize_rows(&features::forward(params, &g.signals, None)?)?;
            energy += f.mean_dirichlet_energy(&w)? / 2.0;
        }
        Ok::<_, Error>((h, energy))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    let hits: Vec<f64> = per.iter().map(|p| p.0).collect();
    Ok(Report2d {
        mean_hits_at_1: hits.iter().sum::<f64>() / n,
        hits_at_1: hits,
        random_expectation: pairs.iter().map(|p| 1.0 / p.a.len() as f64).sum::<f64>() / n,
        mean_dirichlet_energy: per.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::dirichlet_energy;

    fn circumcircle_ok(t: &Triangulation) -> bool {
        t.faces.iter().all(|f| {
            t.points.iter().enumerate().all(|(i, &p)| {
                f.contains(&i)
                    || incircle(
                        coord(t.points[f[0]]),
                        coord(t.points[f[1]]),
                        coord(t.points[f[2]]),
                        coord(p),
                    ) <= 0.0
            })
        })
    }

    #[test]
    fn small_configurations() {
        let t = delaunay(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 0).unwrap();
        assert_eq!(t.faces.len(), 1);
        let t = delaunay(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 0).unwrap();
        assert!(t.degenerate && t.faces.is_empty());
        assert!(!delaunay(&[[0.0, 0.0], [1.0, 0.0]], 0).unwrap().degenerate);
    }

    #[test]
    fn convex_quad_picks_delaunay_diagonal() {
        let pts = [[0.0, 0.0], [4.0, 0.0], [5.0, 3.0], [0.5, 2.0]];
        let t = delaunay(&pts, 0).unwrap();
        assert_eq!(t.faces.len(), 2);
        assert!(circumcircle_ok(&t));
        // brute force: exactly one diagonal passes both circumcircle tests
        let good_02 = incircle(coord(pts[0]), coord(pts[1]), coord(pts[2]), coord(pts[3])) <= 0.0;
        let has_02 = t.faces.iter().all(|f| f.contains(&0) && f.contains(&2));
        assert_eq!(good_02, has_02);
    }

    #[test]
    fn square_uses_lowest_diagonal() {
        let t = delaunay(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], 0).unwrap();
        assert!(t.faces.iter().all(|f| f.contains(&0) && f.contains(&2)));
        let t = delaunay(&[[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [1.0, 1.0]], 0).unwrap();
        assert!(t.faces.iter().all(|f| f.contains(&0) && f.contains(&2)));
    }

    #[test]
    fn random_sets_are_delaunay_and_covariant() {
        let mut rng = substream(3, "test");
        for n in [5, 12, 19, 60] {
            let pts: Vec<Point2> = (0..n)
                .map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)])
                .collect();
            let t = delaunay(&pts, 0).unwrap();
            assert!(circumcircle_ok(&t));
            // Euler: F = 2n − 2 − h for a triangulated point set
            let mesh = TriangleMesh::new(
                pts.iter().map(|p| [p[0], p[1], 0.0]).collect(),
                t.faces.clone(),
                "t",
            )
            .unwrap();
            let h = mesh.boundary_vertices().iter().filter(|&&b| b).count();
            assert_eq!(t.faces.len(), 2 * n - 2 - h);

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<Point2> = perm.iter().map(|&i| pts[i]).collect();
            let tp = delaunay(&permuted, 0).unwrap();
            let mut mapped: Vec<[usize; 3]> = tp
                .faces
                .iter()
                .map(|f| {
                    let mut g = f.map(|v| perm[v]);
                    canonical_rotation(&mut g);
                    g
                })
                .collect();
            mapped.sort_unstable();
            assert_eq!(mapped, t.faces);
        }
    }

    #[test]
    fn duplicates_are_jittered() {
        let t = delaunay(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], 7).unwrap();
        assert_ne!(t.points[1], t.points[3]);
        assert!((t.points[3][0] - 1.0).abs() <= DUPLICATE_JITTER);
        assert_eq!(
            t,
            delaunay(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], 7).unwrap()
        );
    }

    fn graph(points: Vec<Point2>) -> KeypointGraph {
        let n = points.len();
        KeypointGraph::new(points, DMatrix::from_element(n, 2, 1.0), 0).unwrap()
    }

    #[test]
    fn planar_laplacian_matches_surface_operators() {
        let g = graph(vec![[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]]);
        let (w, a) = planar_laplacian(&g).unwrap();
        let off = -1.0 / (2.0 * 3f64.sqrt());
        assert!((w.get(0, 1) - off).abs() < 1e-12);
        assert!((w.get(0, 0) + 2.0 * off).abs() < 1e-12);
        assert!((a.diagonal()[0] - 3f64.sqrt() / 12.0).abs() < 1e-12);

        let mut rng = substream(1, "test");
        let pts: Vec<Point2> = (0..15)
            .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
            .collect();
        let (w, a) = planar_laplacian(&graph(pts.clone())).unwrap();
        assert!(dirichlet_energy(&w, &[3.0; 15]).unwrap() < 1e-9);
        let big: Vec<Point2> = pts.iter().map(|p| [p[0] * 3.0, p[1] * 3.0]).collect();
        let (w2, a2) = planar_laplacian(&graph(big)).unwrap();
        for (i, j, v) in w.csr().triplets() {
            assert!((w2.get(i, j) - v).abs() < 1e-9 * v.abs().max(1.0));
        }
        for (x, y) in a.diagonal().iter().zip(a2.diagonal()) {
            assert!((y - 9.0 * x).abs() < 1e-9 * y);
        }
    }

    #[test]
    fn tiny_graphs_do_not_crash() {
        let (w, _) = planar_laplacian(&graph(vec![[1.0, 1.0]])).unwrap();
        assert_eq!(w.get(0, 0), 0.0);
        let (w, a) = planar_laplacian(&graph(vec![[0.0, 0.0], [2.0, 1.0]])).unwrap();
        assert_eq!(
            (w.get(0, 1), w.get(0, 0), a.diagonal()[1]),
            (-1.0, 1.0, 1.0)
        );
        let (w, _) = planar_laplacian(&graph(vec![[0.0, 0.0], [2.0, 0.0], [1.0, 0.0]])).unwrap();
        assert_eq!((w.get(0, 2), w.get(2, 1), w.get(0, 1)), (-1.0, -1.0, 0.0));
    }

    #[test]
    fn pair_json_round_trip_and_benchmark_gt() {
        let cfg = BenchmarkConfig::default();
        let pairs = generate_benchmark(&cfg, 5, 0, 6).unwrap();
        for p in &pairs {
            assert!((5..=19).contains(&p.a.len()));
            let back = GraphPair::from_json(&p.to_json(), 0).unwrap();
            assert_eq!(&back, p);
            // the embedding part of the signals identifies types across views
            for (i, &j) in p.gt.targets().iter().enumerate() {
                let da =
                    p.a.signals
                        .row(i)
                        .columns(0, cfg.embedding_dim)
                        .into_owned();
                let db =
                    p.b.signals
                        .row(j)
                        .columns(0, cfg.embedding_dim)
                        .into_owned();
                assert!(
                    (da - db).norm()
                        < 8.0 * cfg.descriptor_noise * (cfg.embedding_dim as f64).sqrt()
                );
            }
        }
        assert_eq!(pairs, generate_benchmark(&cfg, 5, 0, 6).unwrap());
    }

    #[test]
    fn identical_graphs_match_identically() {
        let cfg = BenchmarkConfig::default();
        let p = &generate_benchmark(&cfg, 1, 0, 1).unwrap()[0];
        let params = ModelParams::init(
            Architecture {
                in_dim: cfg.signal_dim(),
                hidden_dims: vec![16],
                out_dim: 8,
                n_blocks: 1,
                diffusion: false,
                k: 0,
                hks_times: vec![],
            },
            0,
        )
        .unwrap();
        assert_eq!(
            match_graphs(&params, &p.a, &p.a).unwrap(),
            PointMap::identity(p.a.len())
        );
        let single = graph(vec![[3.0, 4.0]]);
        let single = KeypointGraph {
            signals: DMatrix::from_element(1, cfg.signal_dim(), 0.5),
            ..single
        };
        assert_eq!(
            match_graphs(&params, &single, &single).unwrap(),
            PointMap::identity(1)
        );
    }

    #[test]
    fn training_is_seeded_and_descends() {
        let cfg = BenchmarkConfig::default();
        let pairs = generate_benchmark(&cfg, 2, 0, 10).unwrap();
        for reg in [Regularizer::Dirichlet, Regularizer::Spectral] {
            let tc = TrainConfig2d {
                loss: LossConfig {
                    regularizer: reg,
                    k: 30,
                    ..TrainConfig2d::default().loss
                },
                epochs: 5,
                ..TrainConfig2d::default()
            };
            let (p1, h) = train_2d(&pairs, &tc).unwrap();
            let (p2, _) = train_2d(&pairs, &tc).unwrap();
            assert_eq!(p1, p2);
            assert!(h.last().unwrap().total < h[0].total);
        }
        assert!(train_2d(&[], &TrainConfig2d::default()).is_err());
    }
}
