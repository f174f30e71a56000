//! Hard point maps and exact nearest-neighbor search in feature space.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{l2_normalize_rows, FeatureMatrix};
use crate::fsutil;
use crate::par;

/// Vertex-to-vertex map; `targets()[i]` is the image of source vertex `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointMap(Vec<usize>);

impl PointMap {
    /// Checks every target is below `n_target`.
    pub fn new(targets: Vec<usize>, n_target: usize) -> Result<Self> {
        let m = Self(targets);
        m.check_range(n_target)?;
        Ok(m)
    }

    /// Wraps targets without a range check; use [`check_range`](Self::check_range)
    /// once the target size is known.
    pub fn from_vec(targets: Vec<usize>) -> Self {
        Self(targets)
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn check_range(&self, n_target: usize) -> Result<()> {
        match self.0.iter().position(|&t| t >= n_target) {
            Some(i) => Err(Error::InvalidArgument(format!(
                "map entry {i} = {} out of range for {n_target} targets",
                self.0[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn targets(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// One 0-based index per line.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.0.len() * 6);
        for t in &self.0 {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let l = line.trim();
            if l.is_empty() {
                continue;
            }
            out.push(l.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad vertex index '{l}'"),
            })?);
        }
        Ok(Self(out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsutil::read_string(path)?)
    }
}

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact k-d tree over fixed-dimension points.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    dim: usize,
    points: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl NeighborIndex {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || dim == 0 {
            return Err(Error::InvalidArgument(
                "cannot index an empty point set".into(),
            ));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("rows of unequal length".into()));
        }
        let points: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Self::build(dim, points))
    }

    fn build(dim: usize, points: Vec<f64>) -> Self {
        let n = points.len() / dim;
        let mut idx = Self {
            dim,
            points,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        idx.split(0, n);
        idx
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn split(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = (0..self.dim)
            .map(|d| {
                let (lo, hi) = self.order[start..end].iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), &i| {
                        let v = self.points[i * self.dim + d];
                        (lo.min(v), hi.max(v))
                    },
                );
                hi - lo
            })
            .enumerate()
            .fold(
                (0, -1.0),
                |best, (d, s)| if s > best.1 { (d, s) } else { best },
            )
            .0;
        let mid = start + (end - start) / 2;
        let (pts, d) = (&self.points, self.dim);
        self.order[start..end].sort_by(|&a, &b| {
            pts[a * d + dim]
                .partial_cmp(&pts[b * d + dim])
                .unwrap()
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid] * self.dim + dim];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.split(start, mid);
        let right = self.split(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Exact nearest neighbor `(index, squared distance)`; ties go to the lowest index.
    pub fn nearest(&self, q: &[f64]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: &[f64], best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(self.point(i), q);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Index over the L2-normalized rows of `g2`.
pub fn build_index(g2: &FeatureMatrix) -> Result<NeighborIndex> {
    let g = l2_normalize_rows(g2)?;
    let m = g.matrix();
    let mut points = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        points.extend(m.row(i).iter());
    }
    Ok(NeighborIndex::build(m.ncols(), points))
}

/// For every normalized row of `g1`, the nearest normalized row of the indexed set.
pub fn nearest_neighbor_map(g1: &FeatureMatrix, index: &NeighborIndex) -> Result<PointMap> {
    if g1.d() != index.dim() {
        return Err(Error::Dimension(format!(
            "query features have {} columns, index has {}",
            g1.d(),
            index.dim()
        )));
    }
    let g = l2_normalize_rows(g1)?;
    let m = g.matrix();
    let targets = par::map_range(m.nrows(), |i| {
        let q: Vec<f64> = m.row(i).iter().copied().collect();
        index.nearest(&q).0
    });
    Ok(PointMap(targets))
}

/// Linear-scan reference for [`nearest_neighbor_map`].
pub fn brute_force_map(g1: &FeatureMatrix, g2: &FeatureMatrix) -> Result<PointMap> {
    let a = l2_normalize_rows(g1)?;
    let b = l2_normalize_rows(g2)?;
    let (a, b) = (a.matrix(), b.matrix());
    let rows_b: Vec<Vec<f64>> = (0..b.nrows())
        .map(|j| b.row(j).iter().copied().collect())
        .collect();
    Ok(PointMap(
        (0..a.nrows())
            .map(|i| {
                let q: Vec<f64> = a.row(i).iter().copied().collect();
                let mut best = (0, f64::INFINITY);
                for (j, r) in rows_b.iter().enumerate() {
                    let d = dist2(r, &q);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect(),
    ))
}
